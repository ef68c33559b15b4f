"""Command-line entry point.

Verbs: ``synth``, ``protocol build``, ``train``, ``predict``, ``score``,
``challenge run`` and ``report``. Exit codes: 0 ok, 2 validation failure,
3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .dataset import ProtocolManifest, SynthConfig, build_protocol3, read_catalog, synth_dataset, write_catalog
from .metrics import IdMismatchError, UndefinedMetricError, evaluate_split, evaluate_submission, format_labels, read_labels
from .trainer import ConfigError, TinyModel, TrainConfig, history_to_jsonl, predict, split_data, train, two_stage_train

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG = 0, 2, 3

log = logging.getLogger("survpad")


class ValidationFailure(Exception):
    pass


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out directory is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    raw = _load_json(args.config)
    cfg = SynthConfig.from_dict(raw) if raw else SynthConfig.separated()
    seed = 0 if args.seed is None else args.seed
    records = synth_dataset(cfg, seed)
    if args.out:
        write_catalog(records, args.out)
    else:
        from .dataset import dumps_catalog
        sys.stdout.write(dumps_catalog(records))
    return EXIT_OK


def cmd_protocol_build(args) -> int:
    records = read_catalog(args.catalog)
    manifest = build_protocol3(records)
    _emit(json.dumps(manifest.to_dict(), indent=2) + "\n", args.out)
    if args.labels_dir:
        d = Path(args.labels_dir)
        d.mkdir(parents=True, exist_ok=True)
        labels = {r.sample_id: r.label.as_int for r in records}
        for split in ("train", "dev", "test"):
            (d / f"{split}_labels.csv").write_text(format_labels({i: labels[i] for i in manifest.ids(split)}))
    return EXIT_OK


def _manifest(args, records):
    return ProtocolManifest.load(args.manifest) if args.manifest else build_protocol3(records)


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    records = read_catalog(args.catalog)
    manifest = _manifest(args, records)
    fn = two_stage_train if args.two_stage else train
    model, history = fn(cfg, records, manifest)
    out = _out_dir(args)
    model.save(out / "model.json")
    (out / "history.jsonl").write_text(history_to_jsonl(history))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    last = history[-1]
    print(f"epochs={len(history)} loss={last['loss']:.6f} dev_auc={last['dev_auc']:.4f} dev_acer={last['dev_acer']:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = TinyModel.load(args.model)
    records = read_catalog(args.catalog)
    data = split_data(records, _manifest(args, records))
    scores = {}
    for split in args.split:
        d = data[split]
        scores.update(zip(d.ids, predict(model, d.x, tta=args.tta).tolist()))
    _emit(harness.scores_to_csv(scores), args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    labels = read_labels(args.labels)
    result = harness.validate_submission(Path(args.scores).read_text(), list(labels))
    if not result.ok:
        for err in result.errors:
            print(err, file=sys.stderr)
        raise ValidationFailure("submission rejected")
    if args.manifest:
        manifest = ProtocolManifest.load(args.manifest)
        dev = {i: labels[i] for i in manifest.dev_ids if i in labels}
        test = {i: labels[i] for i in manifest.test_ids if i in labels}
        if set(dev) | set(test) != set(labels):
            raise ValidationFailure("labels cover ids outside the manifest dev/test splits")
        rep = evaluate_submission({i: result.scores[i] for i in dev}, dev,
                                  {i: result.scores[i] for i in test}, test)
    else:
        rep = evaluate_split(result.scores, labels)
    _emit(rep.to_json() + "\n", args.out)
    return EXIT_OK


def _team_from_spec(spec: dict):
    kind = spec.get("kind", "lda")
    attempts = int(spec.get("attempts_per_day", 1))
    if kind == "lda":
        return harness.lda_team(float(spec.get("noise", 0.0)), int(spec.get("seed", 0)), attempts)
    if kind == "random":
        return harness.random_team(int(spec.get("seed", 0)), attempts)
    raise ConfigError(f"unknown team kind {kind!r}")


def cmd_challenge_run(args) -> int:
    raw = _load_json(args.config)
    try:
        ccfg = harness.ChallengeConfig(**raw.get("challenge", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    seed = 0 if args.seed is None else args.seed
    synth = SynthConfig.from_dict(raw["synth"]) if "synth" in raw else SynthConfig.separated(8, 3.0)
    records = synth_dataset(synth, seed)
    manifest = build_protocol3(records)
    vault = harness.LabelVault(manifest, {r.sample_id: r.label.as_int for r in records},
                               {r.sample_id: r.feature for r in records})
    if args.table3:
        teams = {name: harness.injected_team(rep) for name, rep in harness.table3_reports().items()}
    else:
        specs = raw.get("teams") or [
            {"name": "lda_clean", "kind": "lda", "noise": 0.0, "seed": 1},
            {"name": "lda_noisy", "kind": "lda", "noise": 1.0, "seed": 2},
            {"name": "random", "kind": "random", "seed": 3},
        ]
        teams = {s["name"]: _team_from_spec(s) for s in specs}
    result = harness.run_challenge(ccfg, teams, vault)
    out = _out_dir(args)
    harness.report(result.leaderboard, out)
    (out / "dev_leaderboard.json").write_text(result.dev_leaderboard.to_json())
    (out / "audit.jsonl").write_text(result.audit_jsonl())
    sys.stdout.write(result.leaderboard.render())
    return EXIT_OK


def cmd_report(args) -> int:
    if args.table3:
        lb = harness.Leaderboard.from_reports(harness.table3_reports())
    elif args.leaderboard:
        lb = harness.Leaderboard.from_json(Path(args.leaderboard).read_text())
    else:
        raise ConfigError("report needs --leaderboard or --table3")
    if args.out:
        harness.report(lb, args.out)
    sys.stdout.write(lb.render())
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="survpad", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic sample catalog (JSON lines)")
    p.set_defaults(func=cmd_synth)

    proto = sub.add_parser("protocol", help="protocol operations")
    proto_sub = proto.add_subparsers(dest="action", required=True)
    p = proto_sub.add_parser("build", parents=[common], help="split a catalog by quality band")
    p.add_argument("--catalog", required=True)
    p.add_argument("--labels-dir", help="also write <split>_labels.csv files here")
    p.set_defaults(func=cmd_protocol_build)

    p = sub.add_parser("train", parents=[common], help="train a desk-scale model")
    p.add_argument("--catalog", required=True)
    p.add_argument("--manifest")
    p.add_argument("--two-stage", action="store_true", help="frozen-encoder pre-training, then fine-tuning")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write a sample_id,score file")
    p.add_argument("--model", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", nargs="+", default=["dev"], choices=["train", "dev", "test"])
    p.add_argument("--tta", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score", parents=[common], help="validate and score a submission")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest", help="transfer the dev EER threshold to the test ids")
    p.set_defaults(func=cmd_score)

    ch = sub.add_parser("challenge", help="challenge simulation")
    ch_sub = ch.add_subparsers(dest="action", required=True)
    p = ch_sub.add_parser("run", parents=[common], help="simulate both phases with scripted teams")
    p.add_argument("--table3", action="store_true", help="teams submit the published final results")
    p.set_defaults(func=cmd_challenge_run)

    p = sub.add_parser("report", parents=[common], help="render a leaderboard")
    p.add_argument("--leaderboard")
    p.add_argument("--table3", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationFailure, IdMismatchError, UndefinedMetricError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
