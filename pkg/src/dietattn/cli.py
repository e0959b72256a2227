"""Command-line entry point: experiments in, artifacts out.

Five subcommands: verify, train, bench, viz, rank-scan. Flags can come
from a JSON config file (--config); explicit flags win. Every artifact
gets a .meta.json sidecar embedding the merged RunConfig and seed, so a
run can be replayed bit-exactly; wall-clock timestamps live only in the
sidecars, never in artifact bodies.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields

from .analysis import (export_heatmap, gradient_check,
                       position_cosine_stats, rank_scan, verify_theorem1,
                       verify_theorem2, zero_param_check)
from .backend import active as active_backend
from .bench import bench_backends, compare_all, scaling_scan
from .config import AttentionConfig, PositionScheme
from .errors import ConfigError, DietAttnError
from .model import (Model, PositionProbe, SelectiveCopy, batch_loss,
                    evaluate_accuracy, load_model, loss_and_grads,
                    make_optimizer, save_model, train)
from .rng import Rng

SCHEME_CHOICES = ("none", "input-add", "sinusoidal", "diet-abs", "diet-rel",
                  "shaw", "t5", "linformer-diet-abs")
TASKS = ("position-probe", "selective-copy")


@dataclass
class RunConfig:
    """Everything one command run depends on, replay-ready."""

    command: str = ""
    seed: int = 0
    out: str = "out"
    n: int = 32
    d: int = 32
    heads: int = 4
    d_h: int = None
    layers: int = 2
    scheme: str = "none"
    sharing: str = "none"
    d_p: int = 8
    clip: int = 8
    with_value: bool = False
    num_buckets: int = 32
    max_distance: int = 128
    linformer_k: int = None
    segments: int = 0
    segment_location: str = "none"
    trials: int = 200
    steps: int = 300
    task: str = "position-probe"
    lr: float = 3e-3
    optimizer: str = "adam"
    batch_size: int = 1
    reps: int = 30
    warmup: int = 5
    parallel: bool = False
    scaling: bool = False
    backends: bool = False
    checkpoint: str = ""
    batches: int = 4
    inject_grad_error: bool = False

    def to_dict(self):
        return asdict(self)

    def attention_config(self):
        label = self.scheme
        kw = {}
        if label == "none":
            sch = PositionScheme.none()
        elif label == "input-add":
            sch = PositionScheme.input_additive()
        elif label == "sinusoidal":
            sch = PositionScheme.sinusoidal()
        elif label == "diet-abs":
            sch = PositionScheme.diet_abs(self.d_p)
        elif label == "diet-rel":
            sch = PositionScheme.diet_rel()
        elif label == "shaw":
            sch = PositionScheme.shaw(self.clip, self.with_value)
        elif label == "t5":
            sch = PositionScheme.t5(self.num_buckets, self.max_distance)
        elif label == "linformer-diet-abs":
            sch = PositionScheme.diet_abs(self.d_p)
            kw["linformer_k"] = self.linformer_k or max(1, self.n // 4)
        else:
            raise ConfigError(f"unknown scheme {label!r}")
        return AttentionConfig(
            n=self.n, d=self.d, h=self.heads, d_h=self.d_h, scheme=sch,
            sharing=self.sharing, layers=self.layers,
            num_segments=self.segments,
            segment_location=self.segment_location.replace("-", "_"), **kw)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def merge_run_config(command, file_values, flag_values):
    vals = {}
    for key, v in (file_values or {}).items():
        k = key.replace("-", "_")
        if k == "command":
            continue
        if k not in _FIELDS:
            raise ConfigError(f"unknown config file key {key!r}")
        vals[k] = v
    for k, v in flag_values.items():
        if v is not None:
            vals[k] = v
    return RunConfig(command=command, **vals)


def _add_common(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config", help="JSON file of defaults; flags override")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d-h", dest="d_h", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--scheme", choices=SCHEME_CHOICES)
    p.add_argument("--sharing", choices=("none", "layer", "head"))
    p.add_argument("--d-p", dest="d_p", type=int)
    p.add_argument("--clip", type=int)
    p.add_argument("--with-value", dest="with_value", action="store_const",
                   const=True)
    p.add_argument("--num-buckets", dest="num_buckets", type=int)
    p.add_argument("--max-distance", dest="max_distance", type=int)
    p.add_argument("--linformer-k", dest="linformer_k", type=int)
    p.add_argument("--segments", type=int)
    p.add_argument("--segment-location", dest="segment_location",
                   choices=("input", "per-head", "none"))


def build_parser():
    ap = argparse.ArgumentParser(
        prog="dietattn",
        description="attention with decoupled positional encodings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the theorem and gradient suites")
    _add_common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--inject-grad-error", dest="inject_grad_error",
                   action="store_const", const=True, help=argparse.SUPPRESS)

    p = sub.add_parser("train", help="train on a synthetic task")
    _add_common(p)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--batch-size", dest="batch_size", type=int)

    p = sub.add_parser("bench", help="micro-benchmarks across schemes")
    _add_common(p)
    p.add_argument("--reps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--parallel", action="store_const", const=True,
                   help="skip single-CPU pinning")
    p.add_argument("--scaling", action="store_const", const=True,
                   help="time attention cost against n instead")
    p.add_argument("--backends", action="store_const", const=True,
                   help="compare kernel backends instead")

    p = sub.add_parser("viz", help="heatmaps and reports from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--batches", type=int)

    p = sub.add_parser("rank-scan", help="numerical ranks per head")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--batches", type=int)
    return ap


# ------------------------------------------------------------- artifacts

def _sidecar(path, rc, extra=None):
    meta = {"artifact": os.path.basename(path), "command": rc.command,
            "seed": rc.seed, "run_config": rc.to_dict(),
            "backend": active_backend(), "created_unix": time.time()}
    if extra:
        meta.update(extra)
    with open(path + ".meta.json", "w", encoding="ascii") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def _outdir(rc):
    os.makedirs(rc.out, exist_ok=True)
    return rc.out


def _emit_json(path, payload, rc, extra=None):
    with open(path, "w", encoding="ascii") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    _sidecar(path, rc, extra)


# -------------------------------------------------------------- commands

def _verify_batches(rc, model, count=3, mse=False):
    from .tensor import Matrix
    rng = Rng(rc.seed, "verify-batch")
    out = []
    for _ in range(count):
        toks = [rng.randint(0, model.vocab) for _ in range(rc.n)]
        if mse:
            tgt = Matrix(rc.n, model.num_classes)
            rng.fill_normal(tgt.data, 1.0)
            out.append((toks, tgt))
        else:
            out.append((toks,
                        [rng.randint(0, model.num_classes) for _ in range(rc.n)]))
    return out


def _injected_error_report(model, batch, eps=1e-5):
    """Deliberately corrupt one analytic gradient, then compare with FD.

    Exists so the failure path of cmd_verify can be exercised end to
    end; the corrupted value really does disagree with the measured
    slope, there is nothing simulated about the mismatch.
    """
    from .analysis import GradCheckReport, _rel_err
    _, grads = loss_and_grads(model, batch)
    name, g = next(iter(grads.named_grads()))
    corrupted = g.data[0] + 1.0
    par = dict(model.named_params())[name]
    old = par.data[0]
    par.data[0] = old + eps
    model.pos.bump()
    lp = batch_loss(model, batch)
    par.data[0] = old - eps
    model.pos.bump()
    lm = batch_loss(model, batch)
    par.data[0] = old
    model.pos.bump()
    fd = (lp - lm) / (2.0 * eps)
    err = _rel_err(corrupted, fd)
    return GradCheckReport(
        kind="fd-injected-error",
        context={"entry": f"{name}[0]", "offset": 1.0},
        rows=[{"group": name, "max_rel_err": err, "entries_checked": 1}],
        summary={"max_rel_err": err},
        passed=err <= 1e-4)


def cmd_verify(rc):
    out = _outdir(rc)
    d_h = rc.d_h if rc.d_h is not None else rc.d // rc.heads
    suites = []
    suites.append(("theorem1", verify_theorem1(
        rc.n, rc.d, d_h, rc.d_p, trials=rc.trials, seed=rc.seed)))

    t2cfg = AttentionConfig(n=min(rc.n, 12), d=min(rc.d, 16), h=2, layers=2,
                            scheme=PositionScheme.input_additive())
    t2rc = RunConfig(command=rc.command, seed=rc.seed,
                     n=t2cfg.n, d=t2cfg.d, heads=2, layers=2)
    t2model = Model(t2cfg, vocab=16, num_classes=4, seed=rc.seed)
    suites.append(("theorem2", verify_theorem2(
        t2model, _verify_batches(t2rc, t2model), fd_samples=24,
        fd_seed=rc.seed)))

    suites.append(("zero-param-equivalence", zero_param_check(
        min(rc.n, 16), min(rc.d, 16), d_h=4, trials=20, seed=rc.seed)))

    fd_label = rc.scheme if rc.scheme != "none" else "diet-rel"
    fd_rc = RunConfig(command=rc.command, seed=rc.seed, scheme=fd_label,
                      n=min(rc.n, 8), d=8, heads=2, layers=1,
                      d_p=min(rc.d_p, 4), clip=min(rc.clip, 7),
                      num_buckets=8, max_distance=16,
                      linformer_k=min(rc.linformer_k or 4, 4))
    fd_model = Model(fd_rc.attention_config(), vocab=12, num_classes=3,
                     seed=rc.seed)
    suites.append(("finite-difference", gradient_check(
        fd_model, _verify_batches(fd_rc, fd_model, count=1),
        entries_per_tensor=6, seed=rc.seed)))

    if rc.inject_grad_error:
        suites.append(("fd-injected-error",
                       _injected_error_report(fd_model,
                                              _verify_batches(fd_rc, fd_model,
                                                              count=1))))

    all_pass = True
    for name, rep in suites:
        ok = rep.passed
        all_pass = all_pass and ok
        extra = ""
        if name == "theorem1":
            extra = (f" witness_rank={rep.summary['witness_rank']}"
                     f" rel_tol={rep.rel_tol}")
        print(f"{'PASS' if ok else 'FAIL'} {name}{extra}")
    path = os.path.join(out, "verify_report.json")
    _emit_json(path, {"suites": {n: r.to_dict() for n, r in suites},
                      "all_passed": all_pass}, rc)
    if not all_pass:
        failed = [n for n, r in suites if not r.passed]
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _make_task(rc):
    if rc.task == "position-probe":
        return PositionProbe(rc.n)
    if rc.task == "selective-copy":
        return SelectiveCopy(rc.n, vocab=16)
    raise ConfigError(f"unknown task {rc.task!r}")


def cmd_train(rc):
    out = _outdir(rc)
    task = _make_task(rc)
    model = Model(rc.attention_config(), vocab=task.vocab,
                  num_classes=task.num_classes, seed=rc.seed)
    opt = make_optimizer(rc.optimizer, rc.lr)
    hist = train(model, task, rc.steps, opt, seed=rc.seed,
                 batch_size=rc.batch_size)
    csv_path = os.path.join(out, "train_history.csv")
    hist.to_csv(csv_path)
    acc = evaluate_accuracy(model, task, seed=rc.seed)
    _sidecar(csv_path, rc, {"final_loss": hist.losses[-1],
                            "final_accuracy": acc})
    ckpt = os.path.join(out, "checkpoint.zip")
    save_model(ckpt, model)
    _sidecar(ckpt, rc, {"final_accuracy": acc})
    print(f"trained {rc.task} scheme={rc.scheme} steps={rc.steps} "
          f"final_loss={hist.losses[-1]:.6f} accuracy={acc:.4f}")
    return 0


def cmd_bench(rc):
    out = _outdir(rc)
    if rc.scaling:
        rep = scaling_scan(reps=rc.reps, warmup=rc.warmup, seed=rc.seed,
                           parallel=rc.parallel)
        base = "bench_scaling"
        for label, slope in rep.context["slopes"].items():
            print(f"{label}: log-log slope {slope:.3f}")
    elif rc.backends:
        rep = bench_backends(rc.attention_config(), reps=rc.reps,
                             warmup=rc.warmup, seed=rc.seed,
                             scheme=rc.scheme if rc.scheme != "none"
                             else "diet-abs",
                             parallel=rc.parallel)
        base = "bench_backends"
        for e in rep.entries:
            print(f"{e.scheme} {e.mode}: {e.mean_ns / 1e6:.3f} ms "
                  f"(x{e.rel_slowdown:.2f} vs python)")
    else:
        rep = compare_all(rc.attention_config(), reps=rc.reps,
                          warmup=rc.warmup, seed=rc.seed,
                          parallel=rc.parallel)
        base = "bench_compare"
        for e in rep.entries:
            print(f"{e.scheme:20s} {e.mode:10s} {e.mean_ns / 1e6:9.3f} ms "
                  f"x{e.rel_slowdown:.3f}")
    csv_path = os.path.join(out, base + ".csv")
    rep.save_csv(csv_path)
    _sidecar(csv_path, rc)
    json_path = os.path.join(out, base + ".json")
    rep.save_json(json_path)
    _sidecar(json_path, rc)
    return 0


def _viz_model(rc):
    if rc.checkpoint:
        if not os.path.exists(rc.checkpoint):
            raise OSError(f"checkpoint not found: {rc.checkpoint}")
        model, _ = load_model(rc.checkpoint)
        return model
    return Model(rc.attention_config(), vocab=16, num_classes=rc.n,
                 seed=rc.seed)


def _scan_batch(rc, model):
    rng = Rng(rc.seed, "scan-batch")
    n = model.config.n
    return [[rng.randint(0, model.vocab) for _ in range(n)]
            for _ in range(rc.batches)]


def cmd_viz(rc):
    out = _outdir(rc)
    model = _viz_model(rc)
    cfg = model.config
    written = []

    if cfg.scheme.kind in ("diet_abs", "diet_rel", "t5"):
        cache = model.build_cache()
        for layer in range(cfg.layers):
            for head in range(cfg.h):
                name = f"bias_l{layer}h{head}.svg"
                export_heatmap(cache.bias(layer, head),
                               os.path.join(out, name), "heat")
                written.append(name)

    batch = _scan_batch(rc, model)
    _, tape = model.forward(batch[0], keep=True)
    for layer, bt in enumerate(tape.blocks):
        for head, ht in enumerate(bt.attn.heads):
            name = f"probs_l{layer}h{head}.svg"
            export_heatmap(ht.probs, os.path.join(out, name), "gray")
            written.append(name)

    scan = rank_scan(model, batch)
    scan.save_json(os.path.join(out, "rank_report.json"))
    scan.save_csv(os.path.join(out, "rank_report.csv"))
    written += ["rank_report.json", "rank_report.csv"]

    ptab = None
    if cfg.scheme.kind in ("input_add", "sinusoidal"):
        ptab = model.pos.tables["p"]
    elif cfg.scheme.kind == "diet_abs":
        ptab = model.pos.slots[0]["p_q"]
    if ptab is not None:
        try:
            stats = position_cosine_stats(ptab)
            stats.save_json(os.path.join(out, "cosine_stats.json"))
            written.append("cosine_stats.json")
        except ValueError:
            pass  # zero rows (untrained scalar-free init) have no angles
    for name in written:
        _sidecar(os.path.join(out, name), rc)
    print(f"wrote {len(written)} files to {out}")
    for row in scan.rows:
        print(f"layer {row['layer']} head {row['head']}: "
              f"token_rank={row['token_rank']} bias_rank={row['bias_rank']} "
              f"score_rank={row['score_rank']} (rel_tol={scan.rel_tol})")
    return 0


def cmd_rank_scan(rc):
    out = _outdir(rc)
    model = _viz_model(rc)
    scan = rank_scan(model, _scan_batch(rc, model))
    jp = os.path.join(out, "rank_scan.json")
    cp = os.path.join(out, "rank_scan.csv")
    scan.save_json(jp)
    scan.save_csv(cp)
    _sidecar(jp, rc)
    _sidecar(cp, rc)
    for row in scan.rows:
        print(f"layer {row['layer']} head {row['head']}: "
              f"token_rank={row['token_rank']} bias_rank={row['bias_rank']} "
              f"score_rank={row['score_rank']} (rel_tol={scan.rel_tol})")
    return 0


_DISPATCH = {"verify": cmd_verify, "train": cmd_train, "bench": cmd_bench,
             "viz": cmd_viz, "rank-scan": cmd_rank_scan}


def main(argv=None):
    args = build_parser().parse_args(argv)
    flag_values = dict(vars(args))
    command = flag_values.pop("command")
    config_path = flag_values.pop("config", None)
    file_values = {}
    if config_path:
        try:
            with open(config_path, encoding="ascii") as f:
                file_values = json.load(f)
        except OSError as e:
            print(f"error: cannot read config file: {e}", file=sys.stderr)
            return 1
    try:
        rc = merge_run_config(command, file_values, flag_values)
        return _DISPATCH[command](rc)
    except DietAttnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
