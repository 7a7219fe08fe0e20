"""Command-line entry point.

    flexinet features    --in DIR --out DIR [--config C] [--set k=v ...]
    flexinet train       --config C --out DIR [--set k=v ...]
    flexinet distill-fit --logits F --meta META --out DIR
    flexinet quantize    --model F --calibration META --out DIR
    flexinet eval        --model F --data META --split test --out DIR
    flexinet make-data   --out DIR [--config C]
    flexinet energy-hist --data META --out DIR [--bins N]

Exit codes: 0 success, 1 user or config error, 2 internal error.
Every command echoes its resolved config into the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import config as C
from . import distill as DS
from . import quantize as Q
from . import report as R
from .config import ConfigError
from .container import write_features
from .data import (energy_histogram, evaluate, generate_synthetic_corpus,
                   load_tau_metadata, split_counts)
from .features import log_mel, read_wav
from .model import build_model, count_params_macs
from .quantize import calibrate, convert_int8, load_model, save_model
from .train import KdBundle, train_model


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # user error -> exit code 1 per contract
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _resolve_meta(path) -> Path:
    """Accept either a metadata CSV or a corpus directory containing meta.csv."""
    p = Path(path)
    if p.is_dir():
        meta = p / "meta.csv"
        if not meta.exists():
            raise ConfigError(f"no meta.csv in corpus directory {p}")
        return meta
    if not p.exists():
        raise ConfigError(f"metadata file not found: {p}")
    return p


def _load_features(records, mel_cfg):
    return np.concatenate([log_mel(read_wav(r.path), mel_cfg) for r in records], axis=0)


def _resolve_records(cfg, out_dir):
    data = cfg["data"]
    if data.get("corpus"):
        return load_tau_metadata(_resolve_meta(data["corpus"]))
    if data.get("synthetic") is not None:
        spec = C.build_synthetic_spec(cfg)
        return generate_synthetic_corpus(spec, Path(out_dir) / "corpus")
    raise ConfigError("data: set either data.corpus or data.synthetic")


# ---------------------------------------------------------------------------
# commands


def cmd_features(args, cfg):
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    C.echo_config(cfg, out_dir)
    mel_cfg = C.build_mel_config(cfg)
    wavs = sorted(in_dir.glob("*.wav"))
    if not wavs:
        print(f"warning: no WAV files in {in_dir}", file=sys.stderr)
    failures = {}
    for wav in wavs:
        try:
            feats = log_mel(read_wav(wav), mel_cfg)
        except Exception as e:  # noqa: BLE001 - every bad clip lands in the manifest
            failures[wav.name] = str(e)
            continue
        write_features(out_dir / (wav.stem + ".fxf"), feats, wav.stem)
    manifest = out_dir / "failures.json"
    with open(manifest, "w") as f:
        json.dump(failures, f, indent=2, sort_keys=True)
    print(f"extracted {len(wavs) - len(failures)}/{len(wavs)} clips to {out_dir}")
    if failures:
        print(f"{len(failures)} failures listed in {manifest}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args, cfg):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    C.echo_config(cfg, out_dir)
    records = _resolve_records(cfg, out_dir)
    train_records = [r for r in records if r.split == "train"]
    if not train_records:
        raise ConfigError("no training records in the resolved corpus")
    print(f"corpus: {split_counts(records)}")

    mel_cfg = C.build_mel_config(cfg)
    arch = C.build_arch(cfg)
    tcfg = C.build_train_config(cfg)
    policy = C.build_augment_policy(cfg, sample_rate=mel_cfg.sample_rate)
    qat = C.build_qat_schedule(cfg)

    kd = None
    dcfg = cfg["distill"]
    if dcfg["mode"] != "none":
        if not dcfg["logits"]:
            raise ConfigError("distill.mode set but distill.logits is missing")
        tl = DS.read_logits(dcfg["logits"])
        if dcfg["mode"] == "fitted":
            if not dcfg["fusion_params"]:
                raise ConfigError(
                    "distill.mode=fitted requires distill.fusion_params "
                    "(run `flexinet distill-fit` first)")
            params = DS.FusionParams.load(dcfg["fusion_params"])
            if params.alpha.shape[0] != tl.num_teachers:
                raise ConfigError(
                    f"fusion params expect {params.alpha.shape[0]} teachers, "
                    f"logits file has {tl.num_teachers}")
        elif dcfg["mode"] == "uniform":
            params = DS.FusionParams.uniform(tl.num_teachers)
        else:
            raise ConfigError(f"distill.mode must be none|uniform|fitted, got {dcfg['mode']!r}")
        fused = {}
        for r in train_records:
            if r.clip_id not in tl.logits:
                raise ConfigError(f"teacher logits missing for training clip {r.clip_id}")
            fused[r.clip_id] = DS.fuse(tl.logits[r.clip_id], params)
        kd = KdBundle(fused=fused, cfg=C.build_kd_config(cfg))

    model = build_model(arch, seed=tcfg.seed)
    params, macs = count_params_macs(arch, input_hw=(mel_cfg.n_mels, mel_cfg.n_frames))
    print(f"model: {params} params, {macs / 1e6:.2f}M MACs per clip")

    result = train_model(model, train_records, tcfg, policy, kd=kd,
                         qat=qat if qat.enabled else None, mel_cfg=mel_cfg,
                         metrics_path=out_dir / "metrics.jsonl")
    save_model(model, out_dir / "model.fxn")
    R.render_training_curves(result.history, out_dir / "training_curves.png")
    if result.quant_runtime is not None:
        qmodel = convert_int8(model, result.quant_runtime.observers)
        save_model(qmodel, out_dir / "model-int8.fxq")
        print(f"wrote {out_dir / 'model-int8.fxq'}")
    print(f"wrote {out_dir / 'model.fxn'} ({len(result.history)} epochs)")
    return 0


def cmd_distill_fit(args, cfg):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    C.echo_config(cfg, out_dir)
    tl = DS.read_logits(args.logits)
    records = load_tau_metadata(_resolve_meta(args.meta))
    usable = [r for r in records if r.clip_id in tl.logits]
    if not usable:
        raise ConfigError("no overlap between metadata clips and logits file")
    missing = len(records) - len(usable)
    if missing:
        print(f"warning: {missing} metadata clips have no logits; fitting on "
              f"{len(usable)}", file=sys.stderr)
    labels = np.array([r.label_index for r in usable])
    stacked = tl.stack([r.clip_id for r in usable])
    try:
        fitted = DS.fit_fusion(stacked, labels)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    ce_fit = DS.fusion_cross_entropy(stacked, labels, fitted)
    ce_uni = DS.fusion_cross_entropy(stacked, labels,
                                     DS.FusionParams.uniform(tl.num_teachers))
    fitted.save(out_dir / "fusion.json")
    with open(out_dir / "fit_report.json", "w") as f:
        json.dump({"clips": len(usable), "teachers": tl.teacher_ids,
                   "ce_fitted": ce_fit, "ce_uniform": ce_uni,
                   "alpha": fitted.alpha.tolist(), "beta": fitted.beta.tolist()},
                  f, indent=2)
    print(f"fitted fusion on {len(usable)} clips: CE {ce_uni:.4f} -> {ce_fit:.4f}")
    print(f"wrote {out_dir / 'fusion.json'}")
    return 0


def cmd_quantize(args, cfg):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    C.echo_config(cfg, out_dir)
    model = load_model(args.model)
    if isinstance(model, Q.QuantizedModel):
        raise ConfigError(f"{args.model} is already an int8 model")
    records = load_tau_metadata(_resolve_meta(args.calibration))
    calib = [r for r in records if r.split != "test"] or records
    mel_cfg = C.build_mel_config(cfg)
    feats = _load_features(calib, mel_cfg)
    observers = calibrate(model, feats)
    qmodel = convert_int8(model, observers)
    out_path = out_dir / "model-int8.fxq"
    save_model(qmodel, out_path)
    params, _ = count_params_macs(model.cfg,
                                  input_hw=(mel_cfg.n_mels, mel_cfg.n_frames))
    size = out_path.stat().st_size
    with open(out_dir / "size_report.json", "w") as f:
        json.dump({"file_bytes": size, "param_count": params,
                   "calibration_clips": len(calib)}, f, indent=2)
    print(f"calibrated on {len(calib)} clips; wrote {out_path} "
          f"({size} bytes for {params} params)")
    return 0


def cmd_eval(args, cfg):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    C.echo_config(cfg, out_dir)
    model = load_model(args.model)
    records = load_tau_metadata(_resolve_meta(args.data))
    subset = [r for r in records if r.split == args.split]
    if not subset:
        raise ConfigError(f"no records in split {args.split!r}")
    feats = _load_features(subset, C.build_mel_config(cfg))
    rep = evaluate(model, subset, feats)
    R.write_eval_outputs(rep, out_dir)
    print(rep.text_table())
    print(f"wrote report.json, device_accuracy.csv, figures to {out_dir}")
    return 0


def cmd_make_data(args, cfg):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    C.echo_config(cfg, out_dir)
    spec = C.build_synthetic_spec(cfg)
    records = generate_synthetic_corpus(spec, out_dir)
    print(f"wrote {len(records)} clips to {out_dir} ({split_counts(records)})")
    return 0


def cmd_energy_hist(args, cfg):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    C.echo_config(cfg, out_dir)
    records = load_tau_metadata(_resolve_meta(args.data))
    hist = energy_histogram(records, bins=args.bins)
    threshold = cfg["augment"]["adir"]["energy_threshold"]
    with open(out_dir / "energy.json", "w") as f:
        json.dump(hist.to_dict(), f, indent=2)
    R.save_energy_csv(hist, out_dir / "energy.csv")
    R.render_energy_histogram(hist, out_dir / "energy.png", threshold=threshold)
    print(f"mean clip energy {hist.mean:.1f} over {hist.n_clips} clips "
          f"(threshold in config: {threshold:g})")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="flexinet",
                     description="low-complexity acoustic scene classification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config field")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("features", help="batch log-mel extraction")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of WAVs")
    common(p)
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill-fit", help="fit teacher fusion weights")
    p.add_argument("--logits", required=True, help="teacher logits file")
    p.add_argument("--meta", required=True, help="held-out metadata CSV or corpus dir")
    common(p)
    p.set_defaults(fn=cmd_distill_fit)

    p = sub.add_parser("quantize", help="convert a float model to int8")
    p.add_argument("--model", required=True, help="float model container")
    p.add_argument("--calibration", required=True,
                   help="metadata CSV or corpus dir for calibration clips")
    common(p)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("eval", help="device/scene accuracy report")
    p.add_argument("--model", required=True, help="model container (float or int8)")
    p.add_argument("--data", required=True, help="metadata CSV or corpus dir")
    p.add_argument("--split", default="test", choices=["train", "test", "unused"])
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("make-data", help="generate the synthetic corpus")
    common(p)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("energy-hist", help="clip energy distribution analysis")
    p.add_argument("--data", required=True, help="metadata CSV or corpus dir")
    p.add_argument("--bins", type=int, default=50)
    common(p)
    p.set_defaults(fn=cmd_energy_hist)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = C.load_config(args.config, args.overrides)
        return args.fn(args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
