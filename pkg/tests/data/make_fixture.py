"""Regenerate ``families.dat``: 64 synthetic Swiss-Prot entries in 8 families.

Run from this directory: ``python make_fixture.py``. Output is deterministic.
"""
import numpy as np

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"

FAMILIES = [
    ("Eukaryota; Metazoa; Spiralia; Lophotrochozoa; Mollusca; Gastropoda; Conidae; Conus.",
     "Disulfide bond; Knottin; Neurotoxin; Secreted; Toxin.",
     "Binds voltage-gated sodium channels and inhibits inactivation.", "Secreted.", "CCKWCGCPC"),
    ("Bacteria; Pseudomonadota; Gammaproteobacteria; Enterobacterales; Escherichia.",
     "Ribosomal protein; RNA-binding; rRNA-binding.",
     "Binds directly to 23S ribosomal RNA.", "Cytoplasm.", "KRKRGAKV"),
    ("Eukaryota; Viridiplantae; Streptophyta; Embryophyta; Brassicaceae; Arabidopsis.",
     "Chloroplast; Photosynthesis; Transit peptide.",
     "Component of photosystem II light harvesting.", "Plastid, chloroplast thylakoid membrane.", "LLVAIFGL"),
    ("Eukaryota; Metazoa; Chordata; Mammalia; Primates; Hominidae; Homo.",
     "Antimicrobial; Defensin; Disulfide bond; Secreted.",
     "Has antibacterial activity against Gram-negative bacteria.", "Secreted.", "RCICRRGC"),
    ("Archaea; Euryarchaeota; Methanomicrobia; Methanosarcinales; Methanosarcina.",
     "Metal-binding; Zinc; Zinc-finger; DNA-binding.",
     "Transcriptional regulator binding promoter DNA.", "Cytoplasm.", "CPHCGHHE"),
    ("Eukaryota; Fungi; Dikarya; Ascomycota; Saccharomycetes; Saccharomyces.",
     "Membrane; Transmembrane; Transmembrane helix; Transport.",
     "Mediates uptake of hexose sugars.", "Cell membrane; multi-pass membrane protein.", "VLIWFAMV"),
    ("Viruses; Riboviria; Orthornavirae; Pisuviricota; Picornaviridae.",
     "Capsid protein; Virion; Host cytoplasm.",
     "Forms an icosahedral capsid with pseudo T=3 symmetry.", "Virion.", "PTSNQTGY"),
    ("Eukaryota; Metazoa; Arthropoda; Insecta; Hymenoptera; Apidae; Apis.",
     "Amphibian defense peptide; Cytolysis; Hemolysis; Toxin.",
     "Lyses erythrocytes by forming pores in membranes.", "Secreted.", "GIGAVLKVLTTG"),
]


def make(seed=7, per_family=8):
    rng = np.random.default_rng(seed)
    entries = []
    for f, (oc, kw, func, loc, motif) in enumerate(FAMILIES):
        length = int(rng.integers(24, 60))
        base = list(rng.choice(list(ALPHABET), size=length))
        pos = int(rng.integers(0, length - len(motif)))
        base[pos : pos + len(motif)] = list(motif)
        for v in range(per_family):
            seq = list(base)
            for i in rng.choice(length, size=max(1, length // 10), replace=False):
                seq[i] = ALPHABET[rng.integers(20)]
            seq = "".join(seq[: length - int(rng.integers(0, 4))])
            entries.append((f"Q{f}{v:03d}X", f"FAM{f}_{v}", seq, oc, kw, func, loc))
    return entries


def render(entry):
    acc, name, seq, oc, kw, func, loc = entry
    lines = [f"ID   {name}_SYNTH              Reviewed;  {len(seq)} AA.", f"AC   {acc};"]
    lines += _wrap("OC", oc)
    lines += [f"CC   -!- FUNCTION: {func}", f"CC   -!- SUBCELLULAR LOCATION: {loc}"]
    lines += _wrap("KW", kw)
    lines.append(f"SQ   SEQUENCE   {len(seq)} AA;  0 MW;  0000000000000000 CRC64;")
    for i in range(0, len(seq), 60):
        chunk = seq[i : i + 60]
        lines.append("     " + " ".join(chunk[j : j + 10] for j in range(0, len(chunk), 10)))
    lines.append("//")
    return "\n".join(lines)


def _wrap(code, text, width=70):
    out, cur = [], ""
    for word in text.split(" "):
        if cur and len(cur) + 1 + len(word) > width:
            out.append(cur)
            cur = word
        else:
            cur = f"{cur} {word}" if cur else word
    out.append(cur)
    return [f"{code}   {line}" for line in out]


if __name__ == "__main__":
    with open("families.dat", "w") as fh:
        fh.write("\n".join(render(e) for e in make()) + "\n")
