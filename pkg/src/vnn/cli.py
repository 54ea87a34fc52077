"""Command-line front end: gen-data, train, eval, verify.

Configs are flat ``section.key = value`` text files (UTF-8, ``#`` comments).
Parsing is strict: an unknown key is an error, because a typo in a tolerance
key must not silently weaken the verification suite.  All randomness derives
from the single ``seed`` key; subsystem streams use fixed child indices
(10 train data, 11 eval data, and the seeds embedded in TrainConfig and
verify reports).

Exit codes: 0 success, 1 property failure, 2 usage/config error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass

from . import data as D
from . import training as T
from . import verify as V
from .autodiff import Rng
from .models import ModelSpec, build_model

EXIT_OK = 0
EXIT_PROPERTY_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


def _to_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _to_int_tuple(s: str) -> tuple:
    return tuple(int(p.strip()) for p in s.split(",") if p.strip())


def _to_str_tuple(s: str) -> tuple:
    return tuple(p.strip() for p in s.split(",") if p.strip())


_ROT = ("I", "z", "so3")


def _to_rot(s: str) -> str:
    if s not in _ROT:
        raise ValueError(f"rotation policy must be one of {_ROT}, got {s!r}")
    return s


# key -> (converter, default); None default means "required when used"
CONFIG_SCHEMA = {
    "seed": (int, 0),
    "out": (str, "runs/out"),
    "model.architecture": (str, "vn_dgcnn"),
    "model.widths": (_to_int_tuple, (24, 24, 48)),
    "model.k": (int, 8),
    "model.pooling": (str, "mean"),
    "model.nonlinearity": (str, "builtin"),
    "model.negative_slope": (float, 0.2),
    "model.epsilon": (float, 1e-6),
    "model.invariant_depth": (int, 1),
    "model.invariant_global_mean": (_to_bool, True),
    "model.norm": (str, "layer"),
    "model.cross_augment": (_to_bool, False),
    "model.dynamic_graph": (_to_bool, True),
    "model.head": (str, "classify"),
    "model.num_classes": (int, 4),
    "model.head_hidden": (int, 8),
    "model.occ_hidden": (int, 128),
    "model.occ_blocks": (int, 3),
    "data.source": (str, "synthetic"),
    "data.classes": (_to_str_tuple, ("sphere", "box", "torus", "cylinder")),
    "data.per_class": (int, 10),
    "data.eval_per_class": (int, 10),
    "data.points": (int, 64),
    "data.noise_sigma": (float, 0.005),
    "data.point_labels": (_to_bool, False),
    "data.occupancy_queries": (int, 0),
    "data.manifest": (str, ""),
    "data.eval_manifest": (str, ""),
    "train.task": (str, "classify"),
    "train.epochs": (int, 30),
    "train.batch_size": (int, 8),
    "train.learning_rate": (float, 1e-3),
    "train.optimizer": (str, "adam"),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.adam_eps": (float, 1e-8),
    "train.rot": (_to_rot, "I"),
    "train.eval_rot": (_to_rot, "I"),
    "train.occ_queries_per_step": (int, 64),
    "eval.checkpoint": (str, ""),
    "eval.policy": (_to_rot, "I"),
    "verify.trials": (int, 100),
    "verify.tol_layer": (float, 1e-10),
    "verify.tol_net": (float, 1e-8),
    "verify.grad_tol": (float, 1e-5),
    "verify.grad_tol_net": (float, 1e-4),
    "verify.points": (int, 12),
    "verify.channels": (int, 5),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Strict flat key=value parsing; unknown keys and bad values raise."""
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        converter, _ = CONFIG_SCHEMA[key]
        try:
            values[key] = converter(value)
        except ValueError as err:
            raise ConfigError(f"{source}:{line_no}: bad value for {key!r}: {err}")
    return values


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        if key in self.values:
            return self.values[key]
        return CONFIG_SCHEMA[key][1]

    def model_spec(self) -> ModelSpec:
        try:
            return ModelSpec(
                architecture=self["model.architecture"],
                widths=self["model.widths"],
                k=self["model.k"],
                pooling=self["model.pooling"],
                nonlinearity=self["model.nonlinearity"],
                negative_slope=self["model.negative_slope"],
                epsilon=self["model.epsilon"],
                invariant_depth=self["model.invariant_depth"],
                invariant_global_mean=self["model.invariant_global_mean"],
                norm=self["model.norm"],
                cross_augment=self["model.cross_augment"],
                dynamic_graph=self["model.dynamic_graph"],
                head=self["model.head"],
                num_classes=self["model.num_classes"],
                head_hidden=self["model.head_hidden"],
                occ_hidden=self["model.occ_hidden"],
                occ_blocks=self["model.occ_blocks"],
            )
        except ValueError as err:
            raise ConfigError(f"model section: {err}")

    def train_config(self) -> T.TrainConfig:
        try:
            return T.TrainConfig(
                task=self["train.task"],
                epochs=self["train.epochs"],
                batch_size=self["train.batch_size"],
                learning_rate=self["train.learning_rate"],
                optimizer=self["train.optimizer"],
                beta1=self["train.beta1"],
                beta2=self["train.beta2"],
                adam_eps=self["train.adam_eps"],
                train_rot=self["train.rot"],
                eval_rot=self["train.eval_rot"],
                seed=self["seed"],
                occ_queries_per_step=self["train.occ_queries_per_step"],
            )
        except ValueError as err:
            raise ConfigError(f"train section: {err}")

    def dataset(self, rng: Rng):
        if self["data.source"] == "manifest":
            if not self["data.manifest"]:
                raise ConfigError("data.manifest is required with data.source=manifest")
            return D.load_dataset(self["data.manifest"])
        if self["data.source"] != "synthetic":
            raise ConfigError(f"unknown data.source {self['data.source']!r}")
        return self._synthetic(rng, self["data.per_class"])

    def eval_dataset(self, rng: Rng):
        if self["data.source"] == "manifest":
            manifest = self["data.eval_manifest"] or self["data.manifest"]
            return D.load_dataset(manifest)
        return self._synthetic(rng, self["data.eval_per_class"])

    def _synthetic(self, rng: Rng, per_class: int):
        try:
            return D.synth_dataset(
                rng, self["data.classes"], per_class, self["data.points"],
                noise_sigma=self["data.noise_sigma"],
                with_point_labels=self["data.point_labels"],
                occupancy_queries=self["data.occupancy_queries"])
        except ValueError as err:
            raise ConfigError(f"data section: {err}")


def load_run_config(path, overrides: dict) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            values = parse_config_text(fh.read(), source=str(path))
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}")
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    return RunConfig(values)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: RunConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    rng = Rng(cfg["seed"])
    written = []
    for split, split_rng, per_class in (("train", rng.child(10), cfg["data.per_class"]),
                                        ("test", rng.child(11), cfg["data.eval_per_class"])):
        samples = cfg._synthetic(split_rng, per_class)
        entries = []
        for i, sample in enumerate(samples):
            rel = f"{split}_{i:04d}.xyz"
            D.save_xyz(sample, os.path.join(out_dir, rel))
            entries.append((rel, sample.class_label))
        manifest = os.path.join(out_dir, f"{split}_manifest.txt")
        D.save_manifest(entries, manifest)
        written.append((split, len(entries)))
    for split, count in written:
        print(f"{split}: {count} clouds")
    print(f"wrote {out_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    rng = Rng(cfg["seed"])
    dataset = cfg.dataset(rng.child(10))
    spec = cfg.model_spec()
    tcfg = cfg.train_config()

    def log(row):
        print(f"epoch {row[0]:4d}  loss {row[1]:.6f}  metric {row[2]:.4f}")

    model, ckpt, rows = T.train(spec, dataset, tcfg, log=log)
    ckpt_path = os.path.join(out_dir, "checkpoint.vnck")
    T.save_checkpoint(ckpt, ckpt_path)
    note = (f"task={tcfg.task},train_rot={tcfg.train_rot},eval_rot={tcfg.eval_rot},"
            f"seed={tcfg.seed}")
    T.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows, header_note=note)
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {os.path.join(out_dir, 'metrics.csv')}")
    return EXIT_OK


_METRIC_NAMES = {"classify": "accuracy", "segment": "mean_iou",
                 "occupancy": "volumetric_iou"}


def cmd_eval(cfg: RunConfig, out_dir: str, checkpoint: str) -> int:
    ckpt_path = checkpoint or cfg["eval.checkpoint"]
    if not ckpt_path:
        raise ConfigError("eval needs a checkpoint (eval.checkpoint or --checkpoint)")
    model = T.model_from_checkpoint(T.load_checkpoint(ckpt_path))
    task = {"classify": "classify", "segment": "segment",
            "occupancy": "occupancy"}[model.spec.head]
    rng = Rng(cfg["seed"])
    dataset = cfg.eval_dataset(rng.child(11))
    policy = D.AugmentPolicy(cfg["eval.policy"], seed=cfg["seed"] + 17)
    value = T.evaluate(model, dataset, task, policy)
    name = _METRIC_NAMES[task]
    print(f"{name}[{policy.mode}] = {value:.4f}")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "eval.csv")
    new = not os.path.exists(csv_path)
    with open(csv_path, "a", encoding="utf-8", newline="\n") as fh:
        if new:
            fh.write("policy,metric,value\n")
        fh.write(f"{policy.mode},{name},{value:.17g}\n")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    result = V.standard_suite(
        trials=cfg["verify.trials"],
        tol_layer=cfg["verify.tol_layer"],
        tol_net=cfg["verify.tol_net"],
        grad_tol=cfg["verify.grad_tol"],
        grad_tol_net=cfg["verify.grad_tol_net"],
        seed=cfg["seed"],
        points=cfg["verify.points"],
        channels=cfg["verify.channels"],
        log=print,
    )
    V.write_report_csv(os.path.join(out_dir, "verify_report.csv"),
                       result.positive + result.negative)
    print(f"report: {os.path.join(out_dir, 'verify_report.csv')}")
    if result.all_passed():
        print("verification suite: ALL CHECKS PASSED")
        return EXIT_OK
    print("verification suite: FAILURES", file=sys.stderr)
    for item in result.failures():
        if isinstance(item, tuple):
            print(f"  {item[0]}: ratio {item[1]:.4f} over bound {item[2]:.4f}",
                  file=sys.stderr)
        else:
            print(f"  {item}", file=sys.stderr)
    return EXIT_PROPERTY_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vnn",
        description="Rotation-equivariant vector-neuron point-cloud networks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("gen-data", "write synthetic clouds and manifests"),
                            ("train", "train a model per the config"),
                            ("eval", "evaluate a checkpoint under a rotation policy"),
                            ("verify", "run the equivariance/gradient/audit suite")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the seed key")
        p.add_argument("--train-rot", choices=_ROT, default=None,
                       help="override train.rot")
        p.add_argument("--test-rot", choices=_ROT, default=None,
                       help="override the evaluation rotation policy")
        if name == "eval":
            p.add_argument("--checkpoint", default=None, help="checkpoint path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed}
    if args.train_rot is not None:
        overrides["train.rot"] = args.train_rot
    if args.test_rot is not None:
        overrides["train.eval_rot"] = args.test_rot
        overrides["eval.policy"] = args.test_rot
    try:
        cfg = load_run_config(args.config, overrides)
        out_dir = args.out or cfg["out"]
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir, getattr(args, "checkpoint", None))
        return cmd_verify(cfg, out_dir)
    except (ConfigError, D.ParseError, T.CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except T.NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
