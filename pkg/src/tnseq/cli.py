"""Command-line entry point: ``tnseq {train,eval,predict,inspect,bench,synth}``.

Exit status: 0 on success, 1 for data/runtime errors, 2 for usage errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import kernels
from .bench import BENCH_LENGTHS, fit_exponent, time_backends, time_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .data import build_vocab, load_dataset, majority_dataset, save_dataset
from .errors import TnseqError
from .evaluator import BOTS, MODEL_FAMILIES, Model, ModelConfig, contraction_cost
from .schemes import SPECIES, TREE_FAMILIES, count_parameters, tree_rules
from .training import OPTIMIZERS, TrainConfig, evaluate, predict_probs, train


class UsageError(Exception):
    pass


def metrics_path(checkpoint: str | Path) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + ".metrics.jsonl")


def _model_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--family", choices=MODEL_FAMILIES, required=required)
    p.add_argument("--species", choices=SPECIES, default="uniform")
    p.add_argument("--q", type=int, default=1, help="qubits per wire")
    p.add_argument("--depth", type=int, default=1, help="ansatz layers D")
    p.add_argument("--window", type=int, help="CTNS window size (power of two)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tnseq", description="Tensor-network sequence classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model with early stopping")
    _model_flags(t)
    t.add_argument("--bot", choices=BOTS, default="discard")
    t.add_argument("--train", required=True, type=Path)
    t.add_argument("--val", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path, help="checkpoint path; metrics go to <stem>.metrics.jsonl")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--max-len", type=int, help="longest sequence a hierarchical model supports "
                   "(default: longest in train/val)")
    d = TrainConfig()
    t.add_argument("--lr", type=float, default=d.learning_rate)
    t.add_argument("--beta1", type=float, default=d.beta1)
    t.add_argument("--beta2", type=float, default=d.beta2)
    t.add_argument("--epsilon", type=float, default=d.epsilon)
    t.add_argument("--weight-decay", type=float, default=d.weight_decay)
    t.add_argument("--batch-size", type=int, default=d.batch_size)
    t.add_argument("--max-epochs", type=int, default=d.max_epochs)
    t.add_argument("--patience", type=int, default=d.patience)
    t.add_argument("--optimizer", choices=OPTIMIZERS, default=d.optimizer)
    t.add_argument("--spsa-c", type=float, default=d.spsa_c)
    t.add_argument("--spsa-alpha", type=float, default=d.spsa_alpha)
    t.add_argument("--spsa-gamma", type=float, default=d.spsa_gamma)
    t.add_argument("--spsa-stability", type=float, default=d.spsa_stability)
    t.add_argument("--quiet", action="store_true")

    for name, help_ in (("eval", "print accuracy and loss as JSON"), ("predict", "print p1 and the predicted label per row")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--model", required=True, type=Path)
        e.add_argument("--data", required=True, type=Path)
        e.add_argument("--batch-size", type=int, default=256)
        if name == "predict":
            e.add_argument("--precision", type=int, default=6, help="decimals printed for p1")

    i = sub.add_parser("inspect", help="parameter count and contraction-cost bound")
    _model_flags(i)
    i.add_argument("--bot", choices=BOTS, default="postselect")
    i.add_argument("--vocab-size", type=int, required=True)
    i.add_argument("--seq-len", type=int, help="|S|; needed for costs and hierarchical counts")
    i.add_argument("--n-rules", type=int, help="|R| for the rule species")

    b = sub.add_parser("bench", help="forward wall time versus sequence length")
    b.add_argument("--families", default="tree,path")
    b.add_argument("--bots", default="postselect,discard")
    b.add_argument("--q", type=int, default=1)
    b.add_argument("--lengths", default=",".join(map(str, BENCH_LENGTHS)))
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--backends", action="store_true", help="also compare numba and numpy kernels")

    s = sub.add_parser("synth", help="write the synthetic majority task as train/val/test TSV files")
    s.add_argument("--out-dir", required=True, type=Path)
    s.add_argument("--length", type=int, default=8)
    s.add_argument("--sizes", default="512,128,128", help="train,val,test sizes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trees", action="store_true", help="add random parse trees")
    return parser


def _check_combo(family: str, species: str, window: int | None) -> None:
    if species == "rule" and family not in TREE_FAMILIES:
        raise UsageError(f"--species rule needs a syntax family ({', '.join(TREE_FAMILIES)}), got {family}")
    if window is not None and family != "ctns":
        raise UsageError("--window is only valid with --family ctns")
    if family == "ctns":
        if window is None:
            raise UsageError("--family ctns needs --window")
        if window < 1 or window & (window - 1):
            raise UsageError("--window must be a power of two")


def _load(path: Path, family: str):
    data = load_dataset(path)
    if not data:
        raise TnseqError(f"{path}: no examples")
    if family in TREE_FAMILIES:
        for n, ex in enumerate(data, 1):
            if ex.tree is None:
                raise TnseqError(f"{path}: example {n} has no parse tree, required by {family}")
    return data


def cmd_train(a) -> int:
    _check_combo(a.family, a.species, a.window)
    cfg_t = TrainConfig(a.lr, a.beta1, a.beta2, a.epsilon, a.weight_decay, a.batch_size, a.max_epochs,
                        a.patience, a.seed, a.optimizer, a.spsa_c, a.spsa_alpha, a.spsa_gamma, a.spsa_stability)
    train_set = _load(a.train, a.family)
    val_set = _load(a.val, a.family)
    vocab = build_vocab(train_set)
    max_len = None
    if a.species == "hierarchical" and a.family != "ctns":
        max_len = a.max_len or max(len(ex.tokens) for ex in train_set + val_set)
    rules = ()
    if a.species == "rule":
        rules = tuple(sorted(set().union(*(tree_rules(ex.tree) for ex in train_set))))
    cfg = ModelConfig(a.family, a.species, a.bot, a.q, a.depth, a.window, max_len, rules)
    model = Model.create(cfg, vocab, a.seed)

    mpath = metrics_path(a.out)
    a.out.parent.mkdir(parents=True, exist_ok=True)
    with open(mpath, "w", encoding="utf-8") as fh:
        def log(rec):
            fh.write(json.dumps(rec.to_dict()) + "\n")
            fh.flush()
            if not a.quiet:
                print(f"epoch {rec.epoch:4d}  train loss {rec.train_loss:.4f} acc {rec.train_accuracy:.4f}  "
                      f"val loss {rec.val_loss:.4f} acc {rec.val_accuracy:.4f}", file=sys.stderr)
        result = train(model, train_set, val_set, cfg_t, on_epoch=log)
    best = result.metrics[result.best_epoch - 1]
    provenance = {
        "seed": a.seed,
        "train_config": cfg_t.to_dict(),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.metrics),
        "best_val_accuracy": best.val_accuracy,
        "train_accuracy": best.train_accuracy,
        "train_loss": best.train_loss,
    }
    save_checkpoint(a.out, result.model, provenance)
    print(json.dumps({"checkpoint": str(a.out), "metrics": str(mpath), "best_epoch": result.best_epoch,
                      "best_val_accuracy": best.val_accuracy}))
    return 0


def cmd_eval(a) -> int:
    model, _ = load_checkpoint(a.model)
    data = _load(a.data, model.config.family)
    res = evaluate(model, data, batch_size=a.batch_size)
    print(json.dumps({"accuracy": res.accuracy, "loss": res.loss, "n": res.n, "n_degenerate": res.n_degenerate}))
    return 0


def cmd_predict(a) -> int:
    model, _ = load_checkpoint(a.model)
    data = _load(a.data, model.config.family)
    probs, degenerate = predict_probs(model, data, batch_size=a.batch_size)
    out = sys.stdout
    for p1, bad in zip(probs[:, 1], degenerate):
        if bad:
            out.write("nan\t-1\n")
        else:
            out.write(f"{p1:.{a.precision}f}\t{int(p1 > 0.5)}\n")
    return 0


def cmd_inspect(a) -> int:
    _check_combo(a.family, a.species, a.window)
    seq_len = a.window if a.family == "ctns" else a.seq_len
    n = count_parameters(a.family, a.species, a.q, a.depth, a.vocab_size, seq_len=seq_len, n_rules=a.n_rules)
    out = {"parameters": n}
    if a.seq_len is not None:
        out["contraction_cost"] = contraction_cost(a.family, a.bot, a.q, a.seq_len, a.window)
        out["bot"] = a.bot
    print(json.dumps(out))
    return 0


def cmd_bench(a) -> int:
    lengths = [int(x) for x in a.lengths.split(",")]
    print(f"backend: {kernels.backend()}")
    print(f"{'family':<10} {'bot':<10} " + " ".join(f"{n:>9}" for n in lengths) + "  exponent")
    for fam in a.families.split(","):
        for bot in a.bots.split(","):
            secs = [time_forward(fam, bot, a.q, n, a.repeats).seconds for n in lengths]
            exp = fit_exponent(lengths, secs) if len(lengths) > 1 else float("nan")
            print(f"{fam:<10} {bot:<10} " + " ".join(f"{s * 1e3:8.3f}m" for s in secs) + f"  {exp:8.3f}")
    if a.backends:
        for bot in a.bots.split(","):
            t = time_backends(bot=bot, q=a.q)
            print(f"forward+backward, tree/{bot}, 256 x 64 tokens: " +
                  ", ".join(f"{k} {v * 1e3:.2f} ms" for k, v in t.items()))
    return 0


def cmd_synth(a) -> int:
    sizes = [int(x) for x in a.sizes.split(",")]
    if len(sizes) != 3:
        raise UsageError("--sizes takes three comma-separated counts")
    a.out_dir.mkdir(parents=True, exist_ok=True)
    for offset, (name, n) in enumerate(zip(("train", "val", "test"), sizes)):
        data = majority_dataset(n, a.length, seed=a.seed * 3 + offset + 1, with_trees=a.trees)
        save_dataset(data, a.out_dir / f"{name}.tsv")
    print(json.dumps({"out_dir": str(a.out_dir), "sizes": sizes}))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "inspect": cmd_inspect,
            "bench": cmd_bench, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on malformed flags
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"tnseq {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (TnseqError, OSError) as e:
        print(f"tnseq {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
