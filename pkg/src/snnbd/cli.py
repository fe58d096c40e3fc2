"""Command-line entry point: ``snnbd <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from snnbd import harness
from snnbd.defense import run_defenses, write_defense_csv
from snnbd.dvs import DvsBiases, parse_scene_script, simulate_scene
from snnbd.errors import SnnbdError
from snnbd.events import SampleSet, accumulate_frames, load_frames, save_frames, serialize_aer_nmnist
from snnbd.poison import PoisonConfig, build_asr_set, poison_dataset, write_poison_index
from snnbd.snn import build_model, evaluate, evaluate_asr, load_checkpoint, save_checkpoint, train, write_train_log
from snnbd.stealth import stealth_report

log = logging.getLogger("snnbd")


def save_sample_dir(dataset: SampleSet, root, seed: int = -1) -> None:
    """Write ``root/<label>/<index>.frm`` frame files."""
    root = Path(root)
    for k, (frames, label) in enumerate(dataset):
        d = root / str(label)
        d.mkdir(parents=True, exist_ok=True)
        save_frames(d / f"{k:06d}.frm", frames, label, seed)
    (root / "classes.txt").write_text(f"{dataset.num_classes}\n")


def load_sample_dir(root) -> SampleSet:
    root = Path(root)
    files = sorted(root.glob("*/*.frm"), key=lambda p: p.stem)
    if not files:
        raise FileNotFoundError(f"no .frm files under {root}")
    frames, labels = zip(*(load_frames(f)[:2] for f in files))
    num_classes_file = root / "classes.txt"
    num_classes = int(num_classes_file.read_text()) if num_classes_file.exists() else max(labels) + 1
    return SampleSet(np.stack(frames), np.array(labels), num_classes)


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace("experiment", seed=args.seed)
    return cfg.validate()


def cmd_synth(args):
    cfg = _config(args)
    data = harness.load_data(cfg)
    out = Path(args.out_dir)
    for split in ("train", "test"):
        save_sample_dir(getattr(data, split), out / split, cfg.data.data_seed)
    print(f"wrote {len(data.train)} train / {len(data.test)} test samples to {out}")


def cmd_poison(args):
    cfg = _config(args)
    dataset = load_sample_dir(args.data)
    pcfg = PoisonConfig(cfg.poison.epsilon, cfg.poison.target, cfg.trigger())
    poisoned, idx = poison_dataset(dataset, pcfg, cfg.experiment.seed)
    out = Path(args.out_dir)
    save_sample_dir(poisoned, out / "train", cfg.experiment.seed)
    write_poison_index(out / "poison_index.txt", idx)
    if args.asr_from:
        asr = build_asr_set(load_sample_dir(args.asr_from), pcfg)
        save_sample_dir(asr, out / "asr", cfg.experiment.seed)
    print(f"poisoned {len(idx)} of {len(dataset)} samples -> {out}")


def cmd_train(args):
    cfg = _config(args)
    dataset = load_sample_dir(args.data)
    seed = cfg.experiment.seed
    model = build_model(cfg.model_config(), seed=seed)
    eval_set = load_sample_dir(args.eval) if args.eval else None
    result = train(model, dataset, cfg.train_config(seed), eval_set=eval_set)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", model)
    write_train_log(out / "train_log.csv", result.log)
    print(json.dumps(result.log[-1]))


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    dataset = load_sample_dir(args.data)
    if args.target is None:
        print(json.dumps({"clean_acc": evaluate(model, dataset)}))
    else:
        print(json.dumps({"asr": evaluate_asr(model, dataset, args.target)}))


def cmd_defend(args):
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    clean, test, asr = (load_sample_dir(p) for p in (args.clean, args.test, args.asr))
    row = run_defenses(model, clean, test, asr, cfg.poison.target, cfg.train.epochs,
                       cfg.train_config(cfg.experiment.seed), cfg.defense_config())
    trig = cfg.trigger()
    row.update(dataset=cfg.data.source, size=trig.size / 100, attack=harness._attack_name(trig.to_dict()),
               poisoned_frames=trig.duration)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_defense_csv(out / "defense.csv", [row])
    print(json.dumps({k: v for k, v in row.items() if k != "pruned_channels"}))


def cmd_stealth(args):
    clean = load_sample_dir(args.clean)
    poisoned = load_sample_dir(args.poisoned)
    report = stealth_report(clean.frames, poisoned.frames, bins=args.bins, mix_ratio=args.mix_ratio)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stealth.json").write_text(report.to_json() + "\n")
    report.write_curves_csv(out / "stealth_curves.csv")
    print(json.dumps({k: getattr(report, k) for k in ("mean_mse", "psnr_db", "ssim",
                                                      "pixel_entropy_clean", "pixel_entropy_poisoned")}))


def cmd_simulate_dvs(args):
    scene = parse_scene_script(Path(args.scene).read_text())
    biases = DvsBiases(*args.biases) if args.biases else DvsBiases()
    stream = simulate_scene(scene, biases, noise_rate_hz=args.noise_hz, seed=args.seed or 0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "events.bin").write_bytes(serialize_aer_nmnist(stream))
    if args.frames:
        save_frames(out / "frames.frm", accumulate_frames(stream, args.frames, (0, int(scene.duration))))
    print(f"{len(stream)} events -> {out / 'events.bin'}")


def cmd_run(args):
    cfg = _config(args)
    report = harness.run_experiment(cfg)
    _write(args, [report])


def cmd_sweep(args):
    cfg = _config(args)
    reports = harness.sweep(cfg, args.axis, args.values)
    _write(args, reports)


def _write(args, reports):
    formats = ("csv", "json") if args.format == "both" else (args.format,)
    paths = harness.write_reports(reports, args.out_dir, formats)
    for r in reports:
        if r["runs"][0]["poison_index"]:
            write_poison_index(Path(args.out_dir) / "poison_index.txt", r["runs"][0]["poison_index"])
            break
    for r in reports:
        row = harness.report_row(r)
        print(f"{row['name']} {row['axis']}={row['value']}  clean {row['clean_acc']}  asr {row['asr']}")
    print("wrote " + ", ".join(str(p) for p in paths))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snnbd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--out-dir", default="out")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset").set_defaults(func=cmd_synth)

    p = sub.add_parser("poison", parents=[common], help="poison a frame dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--asr-from", help="test set to turn into an ASR set")
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--eval", help="clean set evaluated after every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="clean accuracy, or ASR with --target")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("defend", parents=[common], help="pruning / fine-tuning / fine-pruning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clean", required=True, help="defender's clean data")
    p.add_argument("--test", required=True)
    p.add_argument("--asr", required=True)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("stealth", parents=[common], help="stealthiness metrics")
    p.add_argument("--clean", required=True)
    p.add_argument("--poisoned", required=True)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--mix-ratio", type=float, default=1.0)
    p.set_defaults(func=cmd_stealth)

    p = sub.add_parser("simulate-dvs", parents=[common], help="scene script to AER events")
    p.add_argument("--scene", required=True)
    p.add_argument("--biases", type=float, nargs=6, metavar=("DIFF", "ON", "OFF", "FO", "HPF", "REFR"))
    p.add_argument("--noise-hz", type=float, default=0.0)
    p.add_argument("--frames", type=int, help="also write a T-frame tensor")
    p.set_defaults(func=cmd_simulate_dvs)

    for name, func in (("run", cmd_run), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, parents=[common], help=f"{name} an experiment from --config")
        p.add_argument("--format", choices=("csv", "json", "both"), default="both")
        if name == "sweep":
            p.add_argument("--axis", required=True, help=", ".join(harness.SWEEP_AXES))
            p.add_argument("--values", nargs="*", default=[])
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except SnnbdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
