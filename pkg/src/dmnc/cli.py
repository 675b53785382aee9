"""Command line interface: data generation, training, evaluation, gradient
checking, and gate-trace export.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 verification failure.

A JSON file passed via --config overrides any flags it names. The
DMNC_OUT_DIR environment variable supplies the default output directory and
nothing else. Every artifact embeds the configuration that produced it:
data files carry generator headers, checkpoints carry the run config, and
reports echo the config plus the checkpoint hash.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .baselines import make_model
from .checkpoint import (checkpoint_hash, load_checkpoint, restore_model,
                         restore_optimizer, save_checkpoint)
from .config import (MODEL_KINDS, OUTPUT_KINDS, TASKS, ModelConfig, RunConfig,
                     TrainConfig)
from .errors import DataError, DmncError, ParseError, TrainingError, UsageError
from .model import evaluate_patients, evaluate_sum, train_loop
from .nn import Adam
from .rng import stream
from .tasks import (EmrDataset, SumTaskConfig, TwoViewSample, gen_emr_patients,
                    gen_sum_dataset, history_p_at_1, load_admissions,
                    load_sum_samples, make_emr_config, metric_multilabel,
                    save_admissions, save_sum_samples, split_records)

GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_EPS = (1e-5, 2e-4)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are 1
        raise UsageError(message)


def build_parser() -> _Parser:
    root = _Parser(prog="dmnc", description=__doc__.splitlines()[0])
    sub = root.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="JSON file whose values override these flags")
        p.add_argument("--out-dir", default=None,
                       help="output directory (default: $DMNC_OUT_DIR or .)")
        p.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen-data", help="write train/eval dataset files")
    common(g)
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--lmax", type=int, default=10)
    g.add_argument("--value-max", type=int, default=50)
    g.add_argument("--n", type=int, default=10000,
                   help="training samples (sum task)")
    g.add_argument("--eval-n", type=int, default=2500)
    g.add_argument("--patients", type=int, default=500)
    g.add_argument("--n-diag", type=int, default=20)
    g.add_argument("--n-proc", type=int, default=12)
    g.add_argument("--cross-labels", type=int, default=24)
    g.add_argument("--history-labels", type=int, default=8)

    t = sub.add_parser("train", help="train a model and write checkpoints")
    common(t)
    t.add_argument("--task", choices=TASKS, required=True)
    t.add_argument("--model", choices=MODEL_KINDS, default="dmnc_late")
    t.add_argument("--data", required=True)
    t.add_argument("--embed", type=int, default=64)
    t.add_argument("--hidden", type=int, default=128)
    t.add_argument("--cells", type=int, default=16)
    t.add_argument("--word", type=int, default=64)
    t.add_argument("--read-heads", type=int, default=2)
    t.add_argument("--iterations", type=int, default=10000)
    t.add_argument("--batch", type=int, default=50)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--clip-norm", type=float, default=10.0)
    t.add_argument("--train-seed", type=int, default=0)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--log-every", type=int, default=100,
                   help="print a progress line every this many iterations")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--lmax", type=int, default=None,
                   help="sum task: generate a fresh eval set at this length")
    e.add_argument("--n", type=int, default=2500,
                   help="samples for a fresh eval set")
    e.add_argument("--reset-each-admission", action="store_true",
                   help="ablate cross-admission memory persistence")

    c = sub.add_parser("gradcheck",
                       help="finite-difference check of every model kind")
    common(c)
    c.add_argument("--stride", type=int, default=3,
                   help="probe every stride-th coordinate")
    c.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    c.add_argument("--inject-fault", action="store_true",
                   help=argparse.SUPPRESS)  # test hook: flip one adjoint sign

    d = sub.add_parser("dump-gates",
                       help="per-step write/cache gate trace for one record")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--index", type=int, default=0,
                   help="record number in file order (admissions for emr)")
    d.add_argument("--out", default=None, help="output file (default stdout)")

    return root


def apply_config_file(args: argparse.Namespace) -> None:
    """Values from --config override the parsed flags."""
    if not getattr(args, "config", None):
        return
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"config file is not valid JSON: {e.msg}") from e
    if not isinstance(overrides, dict):
        raise DataError("config file must hold a JSON object of flag values")
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise DataError(f"config file sets unknown flag {key!r}")
        setattr(args, dest, value)


def resolve_out_dir(args: argparse.Namespace) -> Path:
    out = args.out_dir or os.environ.get("DMNC_OUT_DIR") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# -- gen-data ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out_dir = resolve_out_dir(args)
    if args.task == "sum":
        if args.lmax < 1 or args.value_max < 1:
            raise UsageError("--lmax and --value-max must be at least 1")
        if args.n < 1 or args.eval_n < 1:
            raise UsageError("--n and --eval-n must be at least 1")
        cfg = SumTaskConfig(lmax=args.lmax, value_max=args.value_max)
        train = gen_sum_dataset(cfg, args.n, stream(args.seed, "sum-train"))
        evals = gen_sum_dataset(cfg, args.eval_n, stream(args.seed, "sum-eval"))
        train_path = out_dir / "sum_train.jsonl"
        eval_path = out_dir / "sum_eval.jsonl"
        save_sum_samples(train_path, cfg, train)
        save_sum_samples(eval_path, cfg, evals)
        _emit({"task": "sum", "lmax": cfg.lmax, "value_max": cfg.value_max,
               "train": {"path": str(train_path), "n": len(train)},
               "eval": {"path": str(eval_path), "n": len(evals)}})
        return 0

    if args.patients < 3:
        raise UsageError("--patients must be at least 3 to split")
    for name in ("n_diag", "n_proc", "cross_labels", "history_labels"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be at least 1")
    rng = stream(args.seed, "emr")
    cfg = make_emr_config(rng, n_diag=args.n_diag, n_proc=args.n_proc,
                          cross_labels=args.cross_labels,
                          history_labels=args.history_labels)
    patients = gen_emr_patients(cfg, args.patients, rng)
    summary = {"task": "emr", "n_diag": cfg.n_diag, "n_proc": cfg.n_proc,
               "n_label": cfg.n_label, "cross_labels": cfg.cross_labels}
    for name, records in zip(("train", "valid", "test"),
                             split_records(patients)):
        path = out_dir / f"emr_{name}.jsonl"
        save_admissions(path, EmrDataset(cfg.n_diag, cfg.n_proc, cfg.n_label,
                                         records, cfg.cross_labels))
        summary[name] = {"path": str(path), "patients": len(records)}
    _emit(summary)
    return 0


# -- train --------------------------------------------------------------------


def load_task_data(task: str, path: str):
    """Returns (training items, ModelConfig vocab/output fields)."""
    if task == "sum":
        cfg, samples = load_sum_samples(path)
        if not samples:
            raise DataError(f"no samples in {path}")
        fields = dict(vocab_in1=cfg.input_vocab, vocab_in2=cfg.input_vocab,
                      vocab_out=cfg.output_vocab, output="sequence")
        return samples, fields
    dataset = load_admissions(path)
    if not dataset.patients:
        raise DataError(f"no admissions in {path}")
    fields = dict(vocab_in1=dataset.n_diag, vocab_in2=dataset.n_proc,
                  vocab_out=dataset.n_label, output="set")
    return dataset.patients, fields


def cmd_train(args) -> int:
    out_dir = resolve_out_dir(args)
    data, vocab_fields = load_task_data(args.task, args.data)

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        run_config = ckpt.run_config
        if run_config.task != args.task:
            raise DataError(f"checkpoint was trained on task "
                            f"{run_config.task!r}, not {args.task!r}")
        for name, value in vocab_fields.items():
            if getattr(run_config.model_config, name) != value:
                raise DataError(
                    f"dataset needs {name}={value}, checkpoint has "
                    f"{getattr(run_config.model_config, name)}")
        run_config = dataclasses.replace(
            run_config,
            train_config=dataclasses.replace(run_config.train_config,
                                             iterations=args.iterations),
            data_path=args.data, out_dir=str(out_dir))
        model = restore_model(ckpt)
        optimizer = restore_optimizer(ckpt, model, run_config.train_config)
        start_iteration = ckpt.iteration
    else:
        mode = "early" if args.model == "dmnc_early" else "late"
        model_config = ModelConfig(embed=args.embed, hidden=args.hidden,
                                   cells=args.cells, word=args.word,
                                   read_heads=args.read_heads, mode=mode,
                                   **vocab_fields)
        train_config = TrainConfig(iterations=args.iterations,
                                   batch=args.batch, lr=args.lr,
                                   clip_norm=args.clip_norm,
                                   seed=args.train_seed)
        run_config = RunConfig(task=args.task, model=args.model,
                               model_config=model_config,
                               train_config=train_config, seed=args.seed,
                               data_path=args.data, out_dir=str(out_dir))
        model = make_model(args.model, model_config, args.seed)
        optimizer = Adam(model.named_parameters(), lr=train_config.lr,
                         beta1=train_config.beta1, beta2=train_config.beta2,
                         eps=train_config.eps)
        start_iteration = 0

    log_path = out_dir / "train_log.jsonl"
    final_iteration = start_iteration + run_config.train_config.iterations

    with open(log_path, "a", encoding="utf-8") as log_file:
        def on_iteration(record):
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
            it = record["iter"]
            if args.log_every and (it % args.log_every == 0 or it == final_iteration):
                _emit(record)
            if args.checkpoint_every and it % args.checkpoint_every == 0 \
                    and it != final_iteration:
                save_checkpoint(out_dir / f"checkpoint_{it:06d}.json",
                                run_config, model, optimizer, it)

        log = train_loop(model, data, run_config.train_config,
                         on_iteration=on_iteration, optimizer=optimizer,
                         start_iteration=start_iteration)

    final_path = out_dir / "checkpoint_final.json"
    save_checkpoint(final_path, run_config, model, optimizer, final_iteration)
    _emit({"checkpoint": str(final_path),
           "checkpoint_sha256": checkpoint_hash(final_path),
           "iterations": final_iteration, "final_loss": log[-1]["loss"],
           "log": str(log_path)})
    return 0


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    out_dir = resolve_out_dir(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    run_config = ckpt.run_config
    task = run_config.task

    if task == "sum":
        if args.lmax is not None:
            if args.lmax < 1 or args.n < 1:
                raise UsageError("--lmax and --n must be at least 1")
            task_cfg = SumTaskConfig(lmax=args.lmax,
                                     value_max=run_config.model_config.vocab_in1)
            samples = gen_sum_dataset(task_cfg, args.n,
                                      stream(args.seed, f"eval-lmax{args.lmax}"))
            source = {"generated": {"lmax": args.lmax, "n": args.n,
                                    "seed": args.seed}}
        elif args.data:
            cfg, samples = load_sum_samples(args.data)
            if cfg.input_vocab != run_config.model_config.vocab_in1:
                raise DataError(f"eval set has value_max={cfg.value_max}, "
                                f"checkpoint expects "
                                f"{run_config.model_config.vocab_in1}")
            source = {"path": args.data}
        else:
            raise UsageError("eval on the sum task needs --data or --lmax")
        metrics = {"sequence_accuracy": evaluate_sum(model, samples),
                   "n": len(samples)}
    else:
        if not args.data:
            raise UsageError("eval on the emr task needs --data")
        dataset = load_admissions(args.data)
        mc = run_config.model_config
        if (dataset.n_diag, dataset.n_proc, dataset.n_label) != \
                (mc.vocab_in1, mc.vocab_in2, mc.vocab_out):
            raise DataError(
                f"eval set vocabulary ({dataset.n_diag}, {dataset.n_proc}, "
                f"{dataset.n_label}) does not match the checkpoint "
                f"({mc.vocab_in1}, {mc.vocab_in2}, {mc.vocab_out})")
        scores, truths = evaluate_patients(
            model, dataset.patients,
            reset_each_admission=args.reset_each_admission)
        metrics = metric_multilabel(scores, truths)
        metrics["n_admissions"] = len(scores)
        if dataset.cross_labels is not None:
            metrics["history_p_at_1"] = history_p_at_1(
                scores, truths, (dataset.cross_labels, dataset.n_label))
        source = {"path": args.data,
                  "reset_each_admission": args.reset_each_admission}

    report = {"task": task, "metrics": metrics, "data": source,
              "config": run_config.to_dict(),
              "checkpoint_sha256": checkpoint_hash(args.checkpoint)}
    text = json.dumps(report, indent=1, sort_keys=True)
    print(text)
    report_path = out_dir / "eval_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    return 0


# -- gradcheck ----------------------------------------------------------------------


def _fault_injection():
    """Wrap tanh so its recorded adjoint has a flipped sign; forward values
    and therefore finite differences are untouched, so a working checker
    must report a mismatch."""
    original = T.tanh

    def flipped(x):
        out = original(x)
        stack = T._tape_stack
        if stack and stack[-1].nodes and stack[-1].nodes[-1][0] is out:
            node_out, bwd = stack[-1].nodes[-1]
            stack[-1].nodes[-1] = (node_out, lambda g: bwd(-g))
        return out

    T.tanh = flipped
    return original


def cmd_gradcheck(args) -> int:
    if args.stride < 1:
        raise UsageError("--stride must be at least 1")
    seq_sample = TwoViewSample(view1=[1, 4, 2], view2=[0, 5], output=[3, 1])
    set_sample = TwoViewSample(view1=[1, 4, 2], view2=[0, 5],
                               output=frozenset({0, 3, 7}))
    restore = _fault_injection() if args.inject_fault else None
    failures = []
    try:
        for kind in MODEL_KINDS:
            for output in OUTPUT_KINDS:
                config = ModelConfig(vocab_in1=7, vocab_in2=6, vocab_out=8,
                                     embed=8, hidden=8, cells=4, word=6,
                                     read_heads=1, output=output)
                model = make_model(kind, config, seed=args.seed + 11)
                sample = seq_sample if output == "sequence" else set_sample
                report = T.grad_check(lambda: model.forward(sample)[0],
                                      model.named_parameters(),
                                      eps=GRADCHECK_EPS, stride=args.stride)
                for name, err in sorted(report.per_param.items()):
                    _emit({"model": kind, "output": output, "param": name,
                           "max_rel_err": err})
                if not report.passed(args.tolerance):
                    failures.append((kind, output, report.worst_param,
                                     report.max_rel_err))
    finally:
        if restore is not None:
            T.tanh = restore
    for kind, output, param, err in failures:
        _emit({"failed": True, "model": kind, "output": output,
               "worst_param": param, "max_rel_err": err,
               "tolerance": args.tolerance})
    if failures:
        return 3
    _emit({"passed": True, "tolerance": args.tolerance,
           "models": list(MODEL_KINDS), "outputs": list(OUTPUT_KINDS)})
    return 0


# -- dump-gates ------------------------------------------------------------------------


def cmd_dump_gates(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.run_config.model.startswith("dmnc"):
        raise DataError(f"model {ckpt.run_config.model!r} has no memory "
                        f"gates to dump")
    model = restore_model(ckpt)
    task = ckpt.run_config.task
    if task == "sum":
        _, samples = load_sum_samples(args.data)
    else:
        samples = [adm for record in load_admissions(args.data).patients
                   for adm in record.admissions]
    if not 0 <= args.index < len(samples):
        raise DataError(f"--index {args.index} outside the {len(samples)} "
                        f"records in {args.data}")
    sample = samples[args.index]
    trace: list[dict] = []
    model.forward(sample, trace=trace)
    lines = [json.dumps({"header": {
        "config": ckpt.run_config.to_dict(),
        "checkpoint_sha256": checkpoint_hash(args.checkpoint),
        "data": args.data, "index": args.index}}, sort_keys=True)]
    for row in trace:
        lines.append(json.dumps({
            "view": row["view"], "step": row["step"],
            "event_index": row["event_index"], "g_w": row["g_w"],
            "g_c": "" if row["g_c_mean"] is None else row["g_c_mean"],
        }, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# -- entry point --------------------------------------------------------------------------


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "dump-gates": cmd_dump_gates,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        apply_config_file(args)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, ParseError, TrainingError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
