"""``propdiff`` command-line entry point."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config

log = logging.getLogger("propdiff")

GENERATE_MODES = {"text": "text", "raw-feature": "raw_feature", "random-feature": "random_feature"}


class CliError(RuntimeError):
    pass


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    import sklearn
    import torch

    return {
        "propdiff": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "scikit-learn": sklearn.__version__,
    }


def write_manifest(path, command: str, argv, config, inputs: dict, outputs: dict | None = None):
    """Record what was run, with which config, seed, inputs and library versions."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": config.seed,
        "config": config.to_dict(),
        "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in inputs.items() if v},
        "outputs": outputs or {},
        "versions": _versions(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("manifest written to %s", path)


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _require_file(path, flag):
    if path is not None and not Path(path).is_file():
        raise CliError(f"{flag}: file not found: {path}")


def _load_sequences(path) -> list[tuple[str, str]]:
    """(id, sequence) pairs from a ProtSemantic JSONL or a FASTA file."""
    from .generation import read_fasta
    from .swissprot import read_protsemantic

    if str(path).endswith((".jsonl", ".json")):
        return [(r.accession, r.sequence) for r in read_protsemantic(path)]
    return read_fasta(path)


# --- subcommands -------------------------------------------------------------


def cmd_build_dataset(args, cfg):
    from .swissprot import DatasetManifest, filter_records, read_swissprot, write_protsemantic

    _require_file(args.input, "--input")
    ingest = cfg["ingest"]
    min_len = args.min_len if args.min_len is not None else ingest["min_len"]
    max_len = args.max_len if args.max_len is not None else ingest["max_len"]
    manifest = DatasetManifest()
    records = filter_records(read_swissprot(args.input, manifest), min_len, max_len, manifest)
    n = write_protsemantic(records, args.output)
    report = Path(args.report) if args.report else Path(args.output).with_suffix(".report.json")
    report.write_text(manifest.to_json())
    log.info("kept %d of %d parsed records", n, manifest.n_parsed)
    write_manifest(_manifest_path(args.output), "build-dataset", args.argv, cfg, {"input": args.input},
                   {"dataset": str(args.output), "report": str(report), "n_records": n})


def cmd_featurize(args, cfg):
    from .features import PROPERTY_NAMES, PhyschemFeaturizer

    _require_file(args.input, "--input")
    f = cfg["featurizer"]
    records = _load_sequences(args.input)
    feat = PhyschemFeaturizer(max_len=f["max_len"], normalized=not args.raw and f["normalized"], table_path=f["table_path"])
    glob = feat.fit().transform([s for _, s in records]) if records else np.zeros((0, len(PROPERTY_NAMES)))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "length", *PROPERTY_NAMES])
        for (rid, seq), row in zip(records, glob):
            w.writerow([rid, len(seq), *map(repr, map(float, row))])
    write_manifest(_manifest_path(args.out), "featurize", args.argv, cfg, {"input": args.input}, {"features": str(args.out)})


def _training_sequences(path, max_len):
    from .swissprot import read_protsemantic

    records = read_protsemantic(path)
    kept = [r for r in records if len(r.sequence) <= max_len]
    if len(kept) < len(records):
        log.warning("skipping %d records longer than max_len=%d", len(records) - len(kept), max_len)
    if not kept:
        raise CliError(f"{path}: no usable records")
    return kept


def cmd_train_cvae(args, cfg):
    from .cvae import SequenceCVAE

    _require_file(args.data, "--data")
    params = cfg.section("cvae")
    records = _training_sequences(args.data, params["max_len"])
    model = SequenceCVAE(**params, random_state=cfg.seed).fit([r.sequence for r in records])
    model.save(args.out)
    write_manifest(_manifest_path(args.out), "train-cvae", args.argv, cfg, {"data": args.data},
                   {"checkpoint": str(args.out), "final": model.history_[-1] if model.history_ else None})


def cmd_train_aligner(args, cfg):
    from .aligner import BioAligner
    from .features import PhyschemFeaturizer

    _require_file(args.data, "--data")
    _require_file(args.embeddings, "--embeddings")
    params = cfg.section("aligner")
    if args.embeddings:
        params["embedding_file"] = args.embeddings
    records = _training_sequences(args.data, cfg["featurizer"]["max_len"])
    feats = PhyschemFeaturizer(table_path=cfg["featurizer"]["table_path"]).fit().transform([r.sequence for r in records])
    model = BioAligner(**params, random_state=cfg.seed).fit([r.description for r in records], feats)
    model.save(args.out)
    write_manifest(_manifest_path(args.out), "train-aligner", args.argv, cfg,
                   {"data": args.data, "embeddings": args.embeddings},
                   {"checkpoint": str(args.out), "final": model.history_[-1] if model.history_ else None})


def cmd_train_diffusion(args, cfg):
    from .aligner import BioAligner
    from .cvae import SequenceCVAE
    from .diffusion import LatentDiffusion
    from .training import rng_for

    for flag in ("cvae", "aligner", "data"):
        _require_file(getattr(args, flag), f"--{flag}")
    cvae = SequenceCVAE.load(args.cvae)
    aligner = BioAligner.load(args.aligner)
    params = cfg.section("diffusion")
    sampled = params.pop("sampled_latents")
    seqs = [r.sequence for r in _training_sequences(args.data, cvae.max_len)]
    mu, log_var = cvae.encode(seqs)
    if sampled:
        eps = rng_for(cfg.seed, 1).standard_normal(mu.shape)
        latents = mu + np.exp(0.5 * log_var) * eps
    else:
        latents = mu
    conditions = aligner.transform_features(cvae.global_features(seqs))
    model = LatentDiffusion(**params, random_state=cfg.seed).fit(latents, conditions)
    model.save(args.out)
    write_manifest(_manifest_path(args.out), "train-diffusion", args.argv, cfg,
                   {"cvae": args.cvae, "aligner": args.aligner, "data": args.data},
                   {"checkpoint": str(args.out), "final": model.history_[-1] if model.history_ else None})


def read_feature_rows(path) -> np.ndarray:
    """Raw descriptor rows from CSV; a header row (property names) may reorder columns."""
    from .features import PROPERTY_NAMES

    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise CliError(f"{path}: no feature rows")
    order = list(range(len(PROPERTY_NAMES)))
    first = [c.strip() for c in rows[0]]
    if set(PROPERTY_NAMES) <= set(first):
        order = [first.index(n) for n in PROPERTY_NAMES]
        rows = rows[1:]
    out = []
    for lineno, row in enumerate(rows, 1):
        try:
            out.append([float(row[j]) for j in order])
        except (ValueError, IndexError):
            raise CliError(f"{path}: row {lineno}: expected {len(PROPERTY_NAMES)} numeric values") from None
    return np.array(out)


def cmd_generate(args, cfg):
    from .aligner import BioAligner
    from .cvae import SequenceCVAE
    from .diffusion import LatentDiffusion
    from .generation import GenerationRequest, generate, write_fasta

    for flag in ("cvae", "aligner", "diffusion"):
        _require_file(getattr(args, flag), f"--{flag}")
    mode = GENERATE_MODES[args.mode]
    gen_cfg = cfg["generation"]
    count = args.count if args.count is not None else gen_cfg["count"]
    min_len = args.min_len if args.min_len is not None else gen_cfg["min_len"]
    max_len = args.max_len if args.max_len is not None else gen_cfg["max_len"]
    seed = cfg.seed
    inputs = {"cvae": args.cvae, "aligner": args.aligner, "diffusion": args.diffusion}
    if mode == "text":
        if args.text_file is None:
            raise CliError("--mode text requires --text-file")
        _require_file(args.text_file, "--text-file")
        inputs["text_file"] = args.text_file
        requests = [GenerationRequest(mode, text=Path(args.text_file).read_text().strip(), count=count,
                                      min_len=min_len, max_len=max_len, seed=seed)]
    elif mode == "raw_feature":
        if args.features is None:
            raise CliError("--mode raw-feature requires --features")
        _require_file(args.features, "--features")
        inputs["features"] = args.features
        requests = [GenerationRequest(mode, target_features=row, count=count, min_len=min_len,
                                      max_len=max_len, seed=seed) for row in read_feature_rows(args.features)]
    else:
        requests = [GenerationRequest(mode, count=count, min_len=min_len, max_len=max_len, seed=seed)]
    cvae = SequenceCVAE.load(args.cvae)
    aligner = BioAligner.load(args.aligner)
    diffusion = LatentDiffusion.load(args.diffusion)
    out, start = [], 0
    for req in requests:
        out += generate(req, cvae, aligner, diffusion, start_index=start)
        start += req.count
    write_fasta(out, args.out)
    write_manifest(_manifest_path(args.out), "generate", args.argv, cfg, inputs,
                   {"fasta": str(args.out), "n_sequences": len(out), "mode": mode})


def cmd_evaluate(args, cfg):
    from .metrics import distribution_report, read_scores, semantic_fidelity

    _require_file(args.generated, "--generated")
    _require_file(args.natural, "--natural")
    _require_file(args.aligner, "--aligner")
    _require_file(args.scores, "--scores")
    _require_file(args.text_file, "--text-file")
    ev = cfg["evaluation"]
    generated = _load_sequences(args.generated)
    natural = _load_sequences(args.natural)
    scores = read_scores(args.scores) if args.scores else None
    workers = args.workers if args.workers is not None else ev["workers"]
    report = distribution_report(
        generated, natural, scores=scores, score_threshold=ev["score_threshold"], pka=ev["pka"],
        ph=ev["ph"], identity_threshold=ev["identity_threshold"], workers=workers,
    )
    out = Path(args.out)
    report.write(out, bins=ev["histogram_bins"])
    if args.aligner and args.text_file:
        from .aligner import BioAligner

        aligner = BioAligner.load(args.aligner)
        text = Path(args.text_file).read_text().strip()
        fid = [semantic_fidelity(text, s, aligner) for _, s in generated]
        summary = json.loads((out / "summary.json").read_text())
        summary["semantic_fidelity"] = {"mean": float(np.mean(fid)), "values": fid}
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    elif args.aligner:
        log.warning("--aligner given without --text-file; semantic fidelity skipped")
    write_manifest(out / "manifest.json", "evaluate", args.argv, cfg,
                   {"generated": args.generated, "natural": args.natural, "aligner": args.aligner,
                    "scores": args.scores, "text_file": args.text_file},
                   {"dir": str(out)})


def cmd_selftest(args, cfg):
    from .selftest import run_selftest

    if not run_selftest(cfg.seed, echo=lambda line: print(line, file=sys.stdout)):
        raise CliError("selftest failed")


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (default: $PROPDIFF_CONFIG)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, e.g. cvae.kl_weight=0.9 (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    p = argparse.ArgumentParser(prog="propdiff", description="Property-conditioned protein sequence generation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("build-dataset", parents=[common], help="Swiss-Prot .dat -> ProtSemantic JSONL")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--min-len", type=int)
    s.add_argument("--max-len", type=int)
    s.add_argument("--report", help="dataset report JSON (default: <output>.report.json)")
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("featurize", parents=[common], help="global descriptor CSV for a JSONL/FASTA file")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--raw", action="store_true", help="raw table units instead of z-scores")
    s.set_defaults(func=cmd_featurize)

    for name, func, helptext in (
        ("train-cvae", cmd_train_cvae, "train the sequence CVAE"),
        ("train-aligner", cmd_train_aligner, "train the text/descriptor aligner"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        if name == "train-aligner":
            s.add_argument("--embeddings", help="precomputed text-embedding JSONL")
        s.set_defaults(func=func)

    s = sub.add_parser("train-diffusion", parents=[common], help="train the latent diffusion model")
    s.add_argument("--cvae", required=True)
    s.add_argument("--aligner", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_diffusion)

    s = sub.add_parser("generate", parents=[common], help="generate sequences to FASTA")
    s.add_argument("--mode", choices=sorted(GENERATE_MODES), required=True)
    s.add_argument("--text-file")
    s.add_argument("--features", help="CSV of raw descriptor rows (raw-feature mode)")
    s.add_argument("--count", type=int)
    s.add_argument("--min-len", type=int)
    s.add_argument("--max-len", type=int)
    s.add_argument("--cvae", required=True)
    s.add_argument("--aligner", required=True)
    s.add_argument("--diffusion", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="metrics report: generated vs natural")
    s.add_argument("--generated", required=True)
    s.add_argument("--natural", required=True)
    s.add_argument("--aligner")
    s.add_argument("--text-file", help="prompt text for semantic fidelity")
    s.add_argument("--scores", help="external per-sequence score file (id, score)")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("selftest", parents=[common], help="run fast invariant checks")
    s.set_defaults(func=cmd_selftest)
    return p


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    args.argv = argv
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.log_level:
            overrides.append(f"log_level={args.log_level}")
        cfg = load_config(args.config, overrides)
        logging.basicConfig(
            stream=sys.stderr,
            level=cfg["log_level"],
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            force=True,
        )
        args.func(args, cfg)
    except (CliError, ConfigError, ValueError, KeyError, OSError, RuntimeError, TypeError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"propdiff: error: {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
