"""Command line: synth, pretrain, eval, attack, viz, ablate.

Every text output starts with a ``#`` provenance line naming the command, a
hash of the resolved configuration and the seed. Exit codes: 0 success,
1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np
import torch

from . import attacks, datasets, teacher, zeroshot
from .checkpoint import CheckpointError, load_checkpoint
from .geometry import InvalidInputError, normalize_unit_sphere
from .model import ConfigError, DualDenoiser, ModelConfig
from .schedule import NoiseSchedule, diffuse
from .tokenizer import mask_tokens
from .trainer import NumericalError as TrainNumericalError
from .trainer import Teachers, TrainConfig, Trainer

log = logging.getLogger("pointdenoise")

DEFAULT_CLASSES = ["sphere", "cube", "cylinder", "torus"]
DEFAULTS = {
    "model": asdict(ModelConfig()),
    "schedule": {"T": 1000, "s": 0.08, "delta": 200},
    "train": asdict(TrainConfig()),
    "inference": {"n_paths": 8, "t": 600, "logit_scale": 100.0, "ensemble_weights": None,
                  "renormalize": True, "feature_space_ensemble": False},
    "data": {"classes": DEFAULT_CLASSES, "per_class": 32, "test_per_class": 16, "n_points": 1024},
    "teacher": {"dim": 512, "eta": 0.2},
    "attack": {"method": "pgd", "eps": 0.01, "steps": 50, "eot_paths": None, "fixed_noise": False,
               "cw_binary_steps": 10, "cw_iters": 500, "limit": None, "batch_size": 32},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _merge(base, override):
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for sec, vals in override.items():
        if sec not in out or not isinstance(vals, dict):
            raise UsageError(f"unknown config section {sec!r}")
        out[sec].update(vals)
    return out


def resolve_config(args):
    cfg = _merge(DEFAULTS, {})
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            cfg = _merge(cfg, json.load(f))
    # flag overrides, one-for-one with config keys
    flag_map = {
        "steps": ("train", "steps"), "batch_size": ("train", "batch_size"), "lr": ("train", "lr"),
        "n_paths": ("inference", "n_paths"), "t_step": ("inference", "t"),
        "method": ("attack", "method"), "eps": ("attack", "eps"), "attack_steps": ("attack", "steps"),
        "eot_paths": ("attack", "eot_paths"), "limit": ("attack", "limit"),
        "n_points": ("data", "n_points"), "per_class": ("data", "per_class"),
        "s": ("schedule", "s"), "T": ("schedule", "T"), "delta": ("schedule", "delta"),
    }
    for flag, (sec, key) in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[sec][key] = v
    if getattr(args, "ensemble", None):
        try:
            w = [float(v) for v in args.ensemble.split(",")]
        except ValueError:
            raise UsageError(f"--ensemble expects comma-separated numbers, got {args.ensemble!r}") from None
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-6:
            raise UsageError(f"--ensemble weights {w} must be non-negative and sum to 1")
        cfg["inference"]["ensemble_weights"] = w
    if getattr(args, "classes", None):
        cfg["data"]["classes"] = args.classes.split(",")
    cfg["seed"] = args.seed
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def provenance(command, cfg):
    return f"pointdenoise {command} config_sha256={config_hash(cfg)} seed={cfg['seed']}"


def _subset(cls, d):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


def _seed_all(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def load_data(args, cfg, split):
    d = cfg["data"]
    if getattr(args, "data", None):
        manifest = os.path.join(args.data, "manifest.tsv")
        try:
            sets = datasets.load_xyz_dir(args.data, manifest, d["n_points"], cfg["seed"])
        except FileNotFoundError as e:
            raise DataError(str(e)) from e
        return sets[split]
    per = d["per_class"] if split == "train" else d["test_per_class"]
    seed = cfg["seed"] if split == "train" else cfg["seed"] + 1
    return datasets.make_synthetic(d["classes"], per, d["n_points"], seed, split)


def load_teachers(args, cfg, data):
    if getattr(args, "teacher", None):
        tables = {}
        for path in args.teacher:
            tab = teacher.load_embeddings(path)
            tables[tab.modality] = tab
        if "text" not in tables:
            raise DataError("a text-modality teacher table is required")
        return tables.get("image", tables["text"]), tables["text"]
    seed = args.mock_teacher if args.mock_teacher is not None else 0
    samples = list(zip(data.ids(), data.labels())) if data is not None and data.split == "train" else None
    names = data.label_names if data is not None else cfg["data"]["classes"]
    return teacher.mock_teacher(names, cfg["teacher"]["dim"], seed, cfg["teacher"]["eta"], samples)


def load_model(path):
    model, _, meta = load_checkpoint(path)
    model.eval()
    return model, meta


def _inference_cfg(cfg):
    return _subset(zeroshot.InferenceConfig, cfg["inference"])


# ---- commands ----


def cmd_synth(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    header = provenance("synth", cfg)
    rows = []
    for split in ("train", "test"):
        ds = load_data(argparse.Namespace(data=None), cfg, split)
        for pts, label, sid in ds.samples:
            rel = sid + ".xyz"
            os.makedirs(os.path.dirname(os.path.join(args.out, rel)), exist_ok=True)
            datasets.write_xyz(os.path.join(args.out, rel), pts, header)
            rows.append(f"{rel}\t{label}\t{split}")
    with open(os.path.join(args.out, "manifest.tsv"), "w", encoding="utf-8") as f:
        f.write(f"# {header}\n" + "\n".join(rows) + "\n")
    print(f"wrote {len(rows)} clouds to {args.out}")


def cmd_pretrain(args, cfg):
    rng = _seed_all(cfg["seed"])
    data = load_data(args, cfg, "train")
    img, txt = load_teachers(args, cfg, data)
    mcfg = ModelConfig.from_dict({**cfg["model"], "teacher_dim": txt.dim})
    sched = NoiseSchedule(**cfg["schedule"])
    if mcfg.time_steps < sched.n_merged:
        mcfg.time_steps = sched.n_merged
    model = DualDenoiser(mcfg, sched)
    tcfg = _subset(TrainConfig, {**cfg["train"], "seed": cfg["seed"]})
    trainer = Trainer(model, tcfg, Teachers(img, txt), rng=rng)
    log_path = args.log or args.out + ".log"
    with open(log_path, "w", encoding="utf-8") as f:
        f.write(f"# {provenance('pretrain', cfg)}\n")
        trainer.fit(data, log_file=f)
    trainer.save(args.out, {"provenance": provenance("pretrain", cfg)})
    print(f"saved {args.out} after {trainer.step} steps; log {log_path}")


def _eval_rows(model, data, txt, icfg, seed):
    text = txt.matrix(data.label_names)
    logits = zeroshot.predict_logits(model, data.clouds(), text, icfg, np.random.default_rng(seed))
    return logits


def cmd_eval(args, cfg):
    model, _ = load_model(args.ckpt)
    data = load_data(args, cfg, "test")
    _, txt = load_teachers(args, cfg, None if args.teacher else data)
    icfg = _inference_cfg(cfg)
    logits = _eval_rows(model, data, txt, icfg, cfg["seed"])
    pred = logits.argmax(axis=1)
    truth = data.label_index()
    header = provenance("eval", cfg)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(f"# {header}\n")
        f.write("label\tclean_accuracy\tcount\n")
        for i, name in enumerate(data.label_names):
            sel = truth == i
            acc = float((pred[sel] == i).mean()) if sel.any() else float("nan")
            f.write(f"{name}\t{acc!r}\t{int(sel.sum())}\n")
        f.write(f"ALL\t{float((pred == truth).mean())!r}\t{len(truth)}\n")
    pred_path = args.pred_out or os.path.splitext(args.out)[0] + ".predictions.tsv"
    with open(pred_path, "w", encoding="utf-8") as f:
        f.write(f"# {header}\n")
        f.write("sample_id\ttrue\tpredicted\t" + "\t".join(f"logit:{n}" for n in data.label_names) + "\n")
        for sid, y, p, row in zip(data.ids(), truth, pred, logits):
            vals = "\t".join(repr(float(v)) for v in row)
            f.write(f"{sid}\t{data.label_names[y]}\t{data.label_names[p]}\t{vals}\n")
    print(f"accuracy {float((pred == truth).mean()):.4f} ({args.out}, {pred_path})")


def _budget(a, method):
    keys = ("eps", "steps", "eot_paths", "fixed_noise", "cw_binary_steps", "cw_iters")
    return attacks.AttackBudget(method=method, **{k: a[k] for k in keys})


def cmd_attack(args, cfg):
    model, _ = load_model(args.ckpt)
    data = load_data(args, cfg, "test")
    _, txt = load_teachers(args, cfg, None if args.teacher else data)
    a = cfg["attack"]
    clf = zeroshot.ZeroShotClassifier(model, txt, _inference_cfg(cfg), data.label_names)
    budget = _budget(a, a["method"])
    n = len(data) if a["limit"] is None else min(a["limit"], len(data))
    clouds, labels, ids = data.clouds()[:n], data.label_index()[:n], data.ids()[:n]
    rng = np.random.default_rng(cfg["seed"])
    sweep = attacks.robustness_sweep(clf, clouds, labels, [budget], rng, batch_size=a["batch_size"])
    key = (budget.method, budget.eps)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(f"# {provenance('attack', cfg)}\n")
        f.write("sample_id\ttrue\ttarget\tpredicted\tsuccess\tlinf\tl2\tsteps\n")
        for sid, y, r in zip(ids, labels, sweep.results[key]):
            f.write(f"{sid}\t{data.label_names[y]}\t{data.label_names[r.target]}\t{data.label_names[r.prediction]}"
                    f"\t{int(r.success)}\t{r.linf!r}\t{r.l2!r}\t{r.iterations_used}\n")
        f.write("\n# aggregate\n")
        f.write(f"clean_accuracy\t{sweep.clean_accuracy!r}\n")
        f.write(f"robust_accuracy\t{sweep.robust[key]!r}\n")
        f.write(f"attack_success_rate\t{float(np.mean([r.success for r in sweep.results[key]]))!r}\n")
        f.write("\n# robust accuracy by step\nstep\trobust_accuracy\n")
        for step, acc in sweep.curves[key]:
            f.write(f"{step}\t{acc!r}\n")
    print(f"clean {sweep.clean_accuracy:.4f} robust {sweep.robust[key]:.4f} ({args.out})")


def cmd_viz(args, cfg):
    rng = np.random.default_rng(cfg["seed"])
    if args.input:
        pts = datasets.read_xyz(args.input)
    else:
        pts = datasets.sample_shape(args.shape, cfg["data"]["n_points"], rng)
    pts, _ = normalize_unit_sphere(pts)
    if args.mode == "raw":
        out = pts
    elif args.mode == "masked":
        out = mask_tokens(pts, args.groups, args.neighbors, args.mask_ratio, rng)
    else:
        sched = NoiseSchedule(**cfg["schedule"])
        out = diffuse(pts, sched, args.t, rng).z_t
    datasets.write_xyz(args.out, out, provenance("viz", cfg))
    print(f"wrote {len(out)} points to {args.out}")


def ablation_grid(model, data, txt, icfg, n_values, t_values, seed, budget=None, limit=None, batch_size=32):
    """Accuracy (and robust accuracy under ``budget``) per (N, t) cell.

    Every cell restarts its RNG from ``seed`` so a cell matches ``eval`` run
    with the same settings.
    """
    grid = {}
    for n in sorted(n_values):
        for t in sorted(t_values):
            cell = zeroshot.InferenceConfig(**{**vars(icfg), "n_paths": n, "t": t})
            logits = _eval_rows(model, data, txt, cell, seed)
            acc = float((logits.argmax(axis=1) == data.label_index()).mean())
            rob = None
            if budget is not None:
                clf = zeroshot.ZeroShotClassifier(model, txt, cell, data.label_names)
                k = len(data) if limit is None else min(limit, len(data))
                sweep = attacks.robustness_sweep(clf, data.clouds()[:k], data.label_index()[:k], [budget],
                                                 np.random.default_rng(seed), batch_size)
                rob = sweep.robust[(budget.method, budget.eps)]
            grid[(n, t)] = (acc, rob)
    return grid


def write_grid(path, grid, header):
    ns = sorted({n for n, _ in grid})
    ts = sorted({t for _, t in grid})
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {header}\n")
        f.write("N\\t\t" + "\t".join(f"t={t}" for t in ts) + "\n")
        for n in ns:
            f.write(f"N={n}\t" + "\t".join(repr(grid[(n, t)][0]) for t in ts) + "\n")
        if any(v[1] is not None for v in grid.values()):
            f.write("\n# robust accuracy\n")
            f.write("N\\t\t" + "\t".join(f"t={t}" for t in ts) + "\n")
            for n in ns:
                f.write(f"N={n}\t" + "\t".join(repr(grid[(n, t)][1]) for t in ts) + "\n")


def cmd_ablate(args, cfg):
    model, _ = load_model(args.ckpt)
    data = load_data(args, cfg, "test")
    _, txt = load_teachers(args, cfg, None if args.teacher else data)
    budget = None
    if args.attack_method:
        budget = _budget(cfg["attack"], args.attack_method)
    grid = ablation_grid(model, data, txt, _inference_cfg(cfg), _ints(args.n_values), _ints(args.t_values),
                         cfg["seed"], budget, cfg["attack"]["limit"], cfg["attack"]["batch_size"])
    write_grid(args.out, grid, provenance("ablate", cfg))
    print(f"wrote {len(grid)} cells to {args.out}")


def _ints(s):
    return [int(v) for v in s.split(",")]


def build_parser():
    p = _Parser(prog="pointdenoise", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON config; flags override its keys")
        sp.add_argument("--out", required=True)
        if data:
            src = sp.add_mutually_exclusive_group()
            src.add_argument("--data", help="directory with manifest.tsv and XYZ files")
            src.add_argument("--synthetic", action="store_true", help="generated shapes (default)")
            sp.add_argument("--classes", help="comma-separated synthetic classes")
            sp.add_argument("--n-points", type=int)
            tsrc = sp.add_mutually_exclusive_group()
            tsrc.add_argument("--teacher", action="append", help="DDEF embedding file (repeat for image+text)")
            tsrc.add_argument("--mock-teacher", type=int, metavar="SEED")

    sp = sub.add_parser("synth", help="write a synthetic XYZ dataset with manifest")
    common(sp, data=False)
    sp.add_argument("--classes")
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--n-points", type=int)

    sp = sub.add_parser("pretrain", help="train the dual denoiser")
    common(sp)
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--s", type=float)
    sp.add_argument("--T", type=int)
    sp.add_argument("--delta", type=int)
    sp.add_argument("--log")

    for name, hlp in (("eval", "zero-shot accuracy"), ("attack", "targeted attack report"), ("ablate", "N x t grid")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--n-paths", type=int)
        sp.add_argument("--t-step", type=int)
        sp.add_argument("--ensemble", help="comma-separated per-type weights")
        if name == "eval":
            sp.add_argument("--pred-out")
        if name in ("attack", "ablate"):
            sp.add_argument("--eps", type=float)
            sp.add_argument("--attack-steps", "--steps", dest="attack_steps", type=int)
            sp.add_argument("--eot-paths", type=int)
            sp.add_argument("--limit", type=int)
        if name == "attack":
            sp.add_argument("--method", choices=attacks.METHODS)
        if name == "ablate":
            sp.add_argument("--n-values", default="1,4,8")
            sp.add_argument("--t-values", default="0,100,200")
            sp.add_argument("--attack-method", choices=attacks.METHODS)

    sp = sub.add_parser("viz", help="dump a raw / masked / noised cloud as XYZ")
    common(sp, data=False)
    sp.add_argument("--mode", choices=("raw", "masked", "noised"), required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--input")
    src.add_argument("--shape", choices=sorted(datasets.SHAPES))
    sp.add_argument("--groups", type=int, default=128)
    sp.add_argument("--neighbors", type=int, default=16)
    sp.add_argument("--mask-ratio", type=float, default=0.8)
    sp.add_argument("--t", type=int, default=600)
    sp.add_argument("--s", type=float)
    sp.add_argument("--T", type=int)
    sp.add_argument("--n-points", type=int)
    return p


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "eval": cmd_eval, "attack": cmd_attack,
            "viz": cmd_viz, "ablate": cmd_ablate}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        if args.command == "synth" and args.per_class is not None:
            cfg["data"]["test_per_class"] = args.per_class
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, datasets.DataError, teacher.EmbeddingLoadError, CheckpointError, InvalidInputError,
            FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (TrainNumericalError, attacks.NumericalError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
