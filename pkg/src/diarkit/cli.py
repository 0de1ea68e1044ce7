"""Command-line pipeline: simulate, train, adapt, infer, score, report.

Global flags come before the subcommand:

    diarkit --seed 7 --threads 4 simulate --out corpus/ --regime sc ...

A flat key=value file passed with --config provides defaults for any
namespaced option (model.attn_dim, train.batch_size, decode.el, sim.beta,
...); explicit command-line flags win over the file, which wins over the
built-in defaults.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as dio
from . import scoring, simulation
from .annotation import Annotation
from .decoding import DecodeConfig, gt_decode, iterative_decode
from .errors import DiarkitError
from .nn import DiarizationModel, ModelConfig
from .training import TrainConfig, train_loop


class _Settings:
    """Resolved option lookup: flag > config file > built-in default."""

    def __init__(self, args: argparse.Namespace, kv: dict[str, str]):
        self.args = args
        self.kv = kv

    def get(self, dest: str, key: str, default, cast):
        value = getattr(self.args, dest, None)
        if value is not None:
            return value
        if key in self.kv:
            raw = self.kv[key]
            if cast is bool:
                return raw.lower() in ("1", "true", "yes")
            return cast(raw)
        return default


def _parallel_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _model_config(s: _Settings, input_dim: int) -> ModelConfig:
    return ModelConfig(
        input_dim=input_dim,
        attn_dim=s.get("attn_dim", "model.attn_dim", 256, int),
        heads=s.get("heads", "model.heads", 4, int),
        enc_layers=s.get("enc_layers", "model.enc_layers", 4, int),
        dec_layers=s.get("dec_layers", "model.dec_layers", 4, int),
        enh_layers=s.get("enh_layers", "model.enh_layers", 0, int),
        ff_dim=s.get("ff_dim", "model.ff_dim", 2048, int),
        encoder_kind=s.get("encoder", "model.encoder", "transformer", str),
        conformer_kernel=s.get("conformer_kernel", "model.conformer_kernel", 31, int),
        share_dec_enh_layers_2_to_4=s.get(
            "share_layers", "model.share_dec_enh_layers_2_to_4", True, bool
        ),
        dropout=s.get("dropout", "model.dropout", 0.1, float),
    )


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(s: _Settings, seed: int, threads: int) -> int:
    out = Path(s.args.out)
    regime = s.get("regime", "sim.regime", "sm", str)
    n_spk = s.get("n_spk", "sim.n_speakers", 2, int)
    n_mixtures = s.get("n_mixtures", "sim.n_mixtures", 10, int)
    stats = None
    if regime == "sc":
        stats_path = s.get("stats_rttm", "sim.stats_rttm", None, str)
        if stats_path is None:
            print("simulate: --stats-rttm is required for the sc regime", file=sys.stderr)
            return 2
        stats = simulation.extract_stats(
            dio.rttm_parse(Path(stats_path).read_text(encoding="utf-8")),
            source=stats_path,
        )
    cfg = simulation.SimConfig(
        regime=regime,
        n_speakers=n_spk,
        n_mixtures=n_mixtures,
        beta=s.get("beta", "sim.beta", 2.0, float),
        stats=stats,
        target_duration=s.get("duration", "sim.target_duration", 90.0, float),
        feature_dim=s.get("feature_dim", "sim.feature_dim", 23, int),
        frame_period=s.get("raw_period", "sim.frame_period", 0.01, float),
        noise_sigma=s.get("noise", "sim.noise_sigma", 0.1, float),
        seed=seed,
    )
    (out / "rttm").mkdir(parents=True, exist_ok=True)
    (out / "feats").mkdir(parents=True, exist_ok=True)

    def build(index: int) -> dict:
        ann, feats, period = simulation.simulate(cfg, index)
        dio.atomic_write(out / "rttm" / f"{ann.file_id}.rttm", dio.rttm_emit(ann))
        dio.write_features(out / "feats" / f"{ann.file_id}.feat",
                           dio.FeatureMatrix(feats, period))
        from .annotation import overlap_and_speech

        ovl, speech = overlap_and_speech(ann)
        return {
            "id": ann.file_id,
            "duration": ann.duration(),
            "n_speakers": len(ann.speakers()),
            "overlap_pct": 100.0 * ovl / speech if speech else 0.0,
            "rttm": f"rttm/{ann.file_id}.rttm",
            "features": f"feats/{ann.file_id}.feat",
        }

    entries = _parallel_map(build, list(range(n_mixtures)), threads)
    dio.write_manifest(out / "manifest.jsonl", entries)
    all_rttm = "".join(
        (out / entry["rttm"]).read_text(encoding="utf-8") for entry in entries
    )
    dio.atomic_write(out / "all.rttm", all_rttm)
    print(f"simulate: wrote {len(entries)} recordings to {out}")
    return 0


# ---------------------------------------------------------------------------
# train / adapt


def _load_corpus(manifest_path: str, context: int, factor: int):
    root = Path(manifest_path).parent
    items = []
    for entry in dio.read_manifest(manifest_path):
        raw = dio.read_features(root / entry["features"])
        fm = dio.stack_and_subsample(raw, context=context, factor=factor)
        anns = dio.rttm_parse((root / entry["rttm"]).read_text(encoding="utf-8"))
        ann = anns[0] if anns else Annotation(entry["id"])
        items.append((fm.values, fm.frame_period, ann))
    return items


def cmd_train(s: _Settings, seed: int, mode: str) -> int:
    context = s.get("context", "train.context", 7, int)
    factor = s.get("downsample", "train.downsample", 10, int)
    dataset = _load_corpus(s.args.manifest, context, factor)
    dev = _load_corpus(s.args.dev_manifest, context, factor) if s.args.dev_manifest else None
    cfg = TrainConfig(
        segment_len=s.get("segment_len", "train.segment_len", 50.0, float),
        batch_size=s.get("batch_size", "train.batch_size", 64 if mode == "pretrain" else 32, int),
        el_range=(
            s.get("el_min", "train.el_min", 1.0, float),
            s.get("el_max", "train.el_max", 3.0, float),
        ),
        enroll_drop_p=s.get("enroll_drop_p", "train.enroll_drop_p", 0.5, float),
        drop_mode=s.get("drop_mode", "train.drop_mode", "per_speaker", str),
        warmup_steps=s.get("warmup", "train.warmup_steps", 200_000, int),
        epochs=s.get("epochs", "train.epochs", 100 if mode == "pretrain" else 20, int),
        max_steps=s.get("max_steps", "train.max_steps", None, int),
        adapt_lr=s.get("adapt_lr", "train.adapt_lr", 1e-5, float),
        downsample=factor,
        log_every=s.get("log_every", "train.log_every", 10, int),
    )
    input_dim = dataset[0][0].shape[1]
    if s.args.init:
        model = dio.load_checkpoint(s.args.init, seed=seed)
    else:
        model = DiarizationModel(_model_config(s, input_dim), seed=seed)
    result = train_loop(dataset, model, cfg, mode=mode, seed=seed,
                        log_path=s.args.log, dev_set=dev)
    dio.save_checkpoint(s.args.out, result.model)
    losses = [r["loss"] for r in result.history if "loss" in r]
    print(f"{mode}: {len(losses)} logged steps, final loss "
          f"{losses[-1]:.4f}" if losses else f"{mode}: no steps run")
    print(f"{mode}: checkpoint -> {s.args.out}")
    return 0


# ---------------------------------------------------------------------------
# infer


def cmd_infer(s: _Settings, seed: int, threads: int) -> int:
    model = dio.load_checkpoint(s.args.model, seed=seed)
    context = s.get("context", "train.context", 7, int)
    factor = s.get("downsample", "train.downsample", 10, int)

    jobs: list[tuple[str, Path]] = []
    if s.args.manifest:
        root = Path(s.args.manifest).parent
        for entry in dio.read_manifest(s.args.manifest):
            jobs.append((entry["id"], root / entry["features"]))
    for feat in s.args.features or []:
        jobs.append((Path(feat).stem, Path(feat)))
    if not jobs:
        print("infer: no features given (use --manifest or --features)", file=sys.stderr)
        return 2

    refs: dict[str, Annotation] = {}
    if s.args.gt_enroll:
        if not s.args.ref:
            print("infer: --gt-enroll needs --ref RTTM", file=sys.stderr)
            return 2
        for ann in dio.rttm_parse(Path(s.args.ref).read_text(encoding="utf-8")):
            refs[ann.file_id] = ann

    base_cfg = DecodeConfig(
        strategy=s.get("strategy", "decode.strategy", "sc", str),
        el=s.get("el", "decode.el", 0.5, float),
        sdl=s.get("sdl", "decode.sdl", 1.0, float),
        threshold=s.get("threshold", "decode.threshold", 0.5, float),
        max_speakers=s.get("oracle_speakers", "decode.max_speakers", None, int),
        seed=seed,
    )

    def run(job: tuple[int, str, Path]) -> tuple[Annotation, list[dict]]:
        index, file_id, path = job
        fm = dio.stack_and_subsample(dio.read_features(path), context=context, factor=factor)
        if s.args.gt_enroll:
            result = gt_decode(model, fm.values, fm.frame_period,
                               refs.get(file_id, Annotation(file_id)),
                               el=base_cfg.el, threshold=base_cfg.threshold,
                               seed=seed + index)
        else:
            cfg = DecodeConfig(strategy=base_cfg.strategy, el=base_cfg.el,
                               sdl=base_cfg.sdl, threshold=base_cfg.threshold,
                               max_speakers=base_cfg.max_speakers, seed=seed + index)
            result = iterative_decode(model, fm.values, fm.frame_period, cfg,
                                      keep_trace=s.args.trace is not None)
        return result.to_annotation(file_id), result.trace

    outputs = _parallel_map(run, [(i, fid, p) for i, (fid, p) in enumerate(jobs)], threads)
    hyps = [ann for ann, _ in outputs]
    dio.atomic_write(s.args.out, dio.rttm_emit(hyps))
    if s.args.trace:
        import json

        lines = []
        for (file_id, _), (_, trace) in zip(jobs, outputs):
            for step in trace:
                lines.append(json.dumps({"file": file_id, **step}, sort_keys=True))
        dio.atomic_write(s.args.trace, "\n".join(lines) + ("\n" if lines else ""))
    print(f"infer: wrote hypotheses for {len(hyps)} recordings to {s.args.out}")
    return 0


# ---------------------------------------------------------------------------
# score / report


def cmd_score(s: _Settings, threads: int) -> int:
    refs = {a.file_id: a for a in dio.rttm_parse(Path(s.args.ref).read_text(encoding="utf-8"))}
    hyps = {a.file_id: a for a in dio.rttm_parse(Path(s.args.hyp).read_text(encoding="utf-8"))}
    collar = s.get("collar", "score.collar", 0.0, float)
    score_overlap = not s.args.no_overlap_scoring

    def one(file_id: str):
        ref = refs[file_id]
        hyp = hyps.get(file_id, Annotation(file_id))
        result = scoring.der(ref, hyp, collar=collar, score_overlap=score_overlap)
        return file_id, result, scoring.jer(ref, hyp, collar=collar)

    rows = _parallel_map(one, sorted(refs), threads)
    extra = sorted(set(hyps) - set(refs))
    if extra:
        print(f"score: hypothesis files without reference ignored: {extra}", file=sys.stderr)
    table = scoring.format_report(rows)
    sys.stdout.write(table)
    if s.args.report:
        dio.atomic_write(s.args.report, table)
    if s.args.records:
        dio.atomic_write(s.args.records, scoring.report_records(rows))
    return 0


def cmd_report(s: _Settings) -> int:
    if s.args.manifest:
        root = Path(s.args.manifest).parent
        corpus = []
        for entry in dio.read_manifest(s.args.manifest):
            corpus.extend(dio.rttm_parse((root / entry["rttm"]).read_text(encoding="utf-8")))
    else:
        corpus = dio.rttm_parse(Path(s.args.rttm).read_text(encoding="utf-8"))
    sys.stdout.write(simulation.corpus_report(corpus).table())
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diarkit",
        description="Desk-scale diarization: simulate, train, infer, score.",
    )
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    parser.add_argument("--config", help="flat key=value defaults file")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel recordings for simulate/infer/score")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--regime", choices=("sm", "sc"))
    p.add_argument("--n-spk", dest="n_spk", type=int)
    p.add_argument("--n-mixtures", dest="n_mixtures", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--stats-rttm", dest="stats_rttm",
                   help="seed corpus for sc-regime statistics")
    p.add_argument("--duration", type=float)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--noise", type=float)

    for mode in ("train", "adapt"):
        p = sub.add_parser(mode, help=f"{mode} a model on a simulated corpus")
        p.add_argument("--manifest", required=True)
        p.add_argument("--dev-manifest", dest="dev_manifest")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--init", help="starting checkpoint (required for adapt)" )
        p.add_argument("--log", help="metrics log (JSON lines)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--max-steps", dest="max_steps", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--segment-len", dest="segment_len", type=float)
        p.add_argument("--warmup", type=int)
        p.add_argument("--adapt-lr", dest="adapt_lr", type=float)
        p.add_argument("--enroll-drop-p", dest="enroll_drop_p", type=float)
        p.add_argument("--downsample", type=int)
        p.add_argument("--context", type=int)
        p.add_argument("--log-every", dest="log_every", type=int)
        p.add_argument("--attn-dim", dest="attn_dim", type=int)
        p.add_argument("--heads", type=int)
        p.add_argument("--enc-layers", dest="enc_layers", type=int)
        p.add_argument("--dec-layers", dest="dec_layers", type=int)
        p.add_argument("--enh-layers", dest="enh_layers", type=int)
        p.add_argument("--ff-dim", dest="ff_dim", type=int)
        p.add_argument("--encoder", choices=("transformer", "conformer"))
        p.add_argument("--dropout", type=float)

    p = sub.add_parser("infer", help="decode recordings into an RTTM")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest")
    p.add_argument("--features", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("init", "rand", "sc", "sc-local"))
    p.add_argument("--el", type=float)
    p.add_argument("--sdl", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--oracle-speakers", dest="oracle_speakers", type=int)
    p.add_argument("--gt-enroll", dest="gt_enroll", action="store_true",
                   help=argparse.SUPPRESS)  # teacher-forced decoding; needs --ref
    p.add_argument("--ref", help="reference RTTM for --gt-enroll")
    p.add_argument("--trace", help="write per-iteration decode trace (JSON lines)")
    p.add_argument("--downsample", type=int)
    p.add_argument("--context", type=int)

    p = sub.add_parser("score", help="score hypothesis RTTM against reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float)
    p.add_argument("--no-overlap-scoring", dest="no_overlap_scoring",
                   action="store_true")
    p.add_argument("--report", help="also write the text table here")
    p.add_argument("--records", help="write line-delimited JSON records here")

    p = sub.add_parser("report", help="corpus statistics table")
    p.add_argument("--manifest")
    p.add_argument("--rttm")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    kv = dio.read_kv_config(args.config) if args.config else {}
    s = _Settings(args, kv)
    try:
        if args.command == "simulate":
            return cmd_simulate(s, args.seed, args.threads)
        if args.command in ("train", "adapt"):
            if args.command == "adapt" and not args.init:
                print("adapt: --init checkpoint is required", file=sys.stderr)
                return 2
            return cmd_train(s, args.seed, "pretrain" if args.command == "train" else "adapt")
        if args.command == "infer":
            return cmd_infer(s, args.seed, args.threads)
        if args.command == "score":
            return cmd_score(s, args.threads)
        if args.command == "report":
            return cmd_report(s)
        parser.error(f"unknown command {args.command!r}")
    except (DiarkitError, OSError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
