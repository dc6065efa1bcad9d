"""Command-line entry point: train, eval, analyze, rescore, selftest.

Configuration comes from a TOML file with sections mirroring the module
configs (corpus, backbone, pointer, train); ``--set section.key=value``
overrides shadow file values, named flags shadow both, and the environment
variable ``CACHELM_SEED`` overrides the training seed. The effective config
is echoed to stderr at startup, and every subcommand ends with a
machine-parseable ``key=value`` status line on stdout.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import corpus as corp
from . import evaluation as ev
from . import selftest as st
from . import training as tr
from .corpus import ConfigurationError, IngestionError
from .numcore import NumericError

DEFAULTS = {
    "corpus": {
        "train": "",
        "dev": "",
        "test": "",
        "min_count": 1,
        "top_k": 0,  # 0 = disabled
        "chunk_len": 0,  # 0 = inherit train.chunk_len
    },
    "backbone": {
        "backbone": "lstm",
        "layers": 2,
        "hidden": 650,
        "heads": 8,
        "ffn_mult": 4,
        "dropout": 0.5,
        "positional_embedding": True,
        "max_len": 0,  # 0 = chunk_len
    },
    "pointer": {
        "enabled": True,
        "window": 100,
        "memory_augmentation": True,
        "exclude": [],
    },
    "train": {
        "lr0": 0.0,  # 0 = backbone default (1.0 lstm, 0.1 transformer)
        "lr_decay": 0.5,
        "clip_norm": 5.0,
        "epochs": 10,
        "batch_streams": 16,
        "chunk_len": 0,  # 0 = pointer.window
        "seed": 0,
        "precision": 64,
    },
}


def _merge_config(base: dict, overlay: dict, path: str = "") -> None:
    for key, value in overlay.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"'{path}{key}' must be a section")
            _merge_config(base[key], value, f"{path}{key}.")
        else:
            base[key] = value


def _parse_literal(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(path: str | None, sets: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path, "rb") as fh:
            _merge_config(cfg, tomllib.load(fh))
    for item in sets or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2 or parts[0] not in cfg or parts[1] not in cfg[parts[0]]:
            raise ConfigurationError(f"unknown config key '{dotted}'")
        cfg[parts[0]][parts[1]] = _parse_literal(raw)
    return cfg


def _as_bool(value, key: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("on", "true", "yes"):
        return True
    if isinstance(value, str) and value.lower() in ("off", "false", "no"):
        return False
    raise ConfigurationError(f"{key} must be a boolean or on/off, got {value!r}")


def resolve_config(cfg: dict) -> dict:
    cfg = copy.deepcopy(cfg)
    cfg["pointer"]["enabled"] = _as_bool(cfg["pointer"]["enabled"], "pointer.enabled")
    cfg["pointer"]["memory_augmentation"] = _as_bool(
        cfg["pointer"]["memory_augmentation"], "pointer.memory_augmentation"
    )
    cfg["backbone"]["positional_embedding"] = _as_bool(
        cfg["backbone"]["positional_embedding"], "backbone.positional_embedding"
    )
    if not cfg["train"]["chunk_len"]:
        cfg["train"]["chunk_len"] = cfg["pointer"]["window"] or 100
    if not cfg["corpus"]["chunk_len"]:
        cfg["corpus"]["chunk_len"] = cfg["train"]["chunk_len"]
    if not cfg["backbone"]["max_len"]:
        cfg["backbone"]["max_len"] = cfg["train"]["chunk_len"]
    if not cfg["train"]["lr0"]:
        cfg["train"]["lr0"] = 1.0 if cfg["backbone"]["backbone"] == "lstm" else 0.1
    env_seed = os.environ.get("CACHELM_SEED")
    if env_seed is not None:
        cfg["train"]["seed"] = int(env_seed)
    return cfg


def echo_config(cfg: dict) -> None:
    for section, entries in cfg.items():
        for key, value in entries.items():
            print(f"config {section}.{key}={value}", file=sys.stderr)


def model_config_dicts(cfg: dict) -> tuple[str, dict, dict]:
    bb = cfg["backbone"]
    kind = bb["backbone"]
    if kind == "lstm":
        backbone_cfg = {
            "layers": bb["layers"],
            "hidden": bb["hidden"],
            "embed": bb["hidden"],
            "dropout": bb["dropout"],
        }
    elif kind == "transformer":
        backbone_cfg = {
            "layers": bb["layers"],
            "d_model": bb["hidden"],
            "heads": bb["heads"],
            "ffn_mult": bb["ffn_mult"],
            "dropout": bb["dropout"],
            "use_positional_embedding": bb["positional_embedding"],
            "max_len": bb["max_len"],
        }
    else:
        raise ConfigurationError(f"unknown backbone {kind!r}")
    pt = cfg["pointer"]
    pointer_cfg = {
        "enabled": pt["enabled"],
        "window": pt["window"],
        "memory_augmentation": pt["memory_augmentation"],
        "exclude": list(pt["exclude"]),
    }
    return kind, backbone_cfg, pointer_cfg


def _epoch_logger(rec: dict) -> None:
    if "event" in rec:
        print(f"warning: training {rec['event']} at epoch {rec['epoch']}: {rec['error']}", file=sys.stderr)
        return
    print(
        f"epoch={rec['epoch']} train_ppl={rec['train_ppl']:.4f} "
        f"dev_ppl={rec['dev_ppl']:.4f} lr={rec['lr']:.6g} sec={rec['sec']:.1f}",
        file=sys.stderr,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(load_config(args.config, args.set))
    for key in ("train", "dev", "test"):
        val = getattr(args, key, None)
        if val:
            cfg["corpus"][key] = val
    if args.min_count is not None:
        cfg["corpus"]["min_count"] = args.min_count
    if args.top_k is not None:
        cfg["corpus"]["top_k"] = args.top_k
    if args.chunk_len is not None:
        cfg["corpus"]["chunk_len"] = args.chunk_len
        cfg["train"]["chunk_len"] = args.chunk_len
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.pointer_exclude is not None:
        cfg["pointer"]["exclude"] = [w for w in args.pointer_exclude.split(",") if w]
    echo_config(cfg)

    if not cfg["corpus"]["train"] or not cfg["corpus"]["dev"]:
        raise ConfigurationError("train and dev corpus paths are required")
    train_lines = corp.read_lines(cfg["corpus"]["train"])
    dev_lines = corp.read_lines(cfg["corpus"]["dev"])
    top_k = cfg["corpus"]["top_k"] or None
    vocab = corp.build_vocab(train_lines, min_count=cfg["corpus"]["min_count"], top_k=top_k)
    chunk_len = cfg["corpus"]["chunk_len"]
    train_stream = corp.encode_stream(vocab, train_lines, chunk_len)
    dev_stream = corp.encode_stream(vocab, dev_lines, chunk_len)

    kind, backbone_cfg, pointer_cfg = model_config_dicts(cfg)
    tcfg = tr.TrainConfig(**cfg["train"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / "vocab.tsv")

    ckpt = tr.train(
        vocab, train_stream, dev_stream, kind, backbone_cfg, pointer_cfg, tcfg, log=_epoch_logger
    )
    path = out_dir / "best.ckpt"
    ckpt.save(path)
    print(f"best_epoch={ckpt.epoch} dev_ppl={ckpt.dev_ppl:.6f}", file=sys.stderr)
    if cfg["corpus"]["test"]:
        test_stream = corp.encode_stream(vocab, corp.read_lines(cfg["corpus"]["test"]), chunk_len)
        print(f"test_ppl={tr.evaluate_perplexity(ckpt, test_stream):.6f}", file=sys.stderr)
    print(f"ckpt={path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = tr.Checkpoint.load(args.ckpt)
    vocab = corp.Vocabulary.load(args.vocab) if args.vocab else ckpt.vocab
    chunk_len = args.chunk_len or int(ckpt.train_cfg["chunk_len"])
    stream = corp.encode_stream(vocab, corp.read_lines(args.text), chunk_len)
    if args.cache_len:
        if stream.vocab_hash != ckpt.vocab_hash:
            raise tr.CompatibilityError(
                f"vocabulary mismatch: stream {stream.vocab_hash} vs checkpoint {ckpt.vocab_hash}"
            )
        if args.cache_grid:
            best = None
            for theta in (0.0, 0.1, 0.3, 0.5, 1.0):
                for lam in (0.05, 0.1, 0.2, 0.3):
                    ppl = ev.neural_cache_adapt(ckpt, stream, args.cache_len, theta, lam)
                    print(f"cache theta={theta} lam={lam} ppl={ppl:.6f}", file=sys.stderr)
                    if best is None or ppl < best[0]:
                        best = (ppl, theta, lam)
            print(f"best_theta={best[1]} best_lam={best[2]}", file=sys.stderr)
            ppl = best[0]
        else:
            ppl = ev.neural_cache_adapt(ckpt, stream, args.cache_len, args.cache_theta, args.cache_lam)
    else:
        ppl = tr.evaluate_perplexity(ckpt, stream, batch_streams=args.batch_streams)
    print(f"ppl={ppl:.6f}")
    return 0


def cmd_analyze(args) -> int:
    ckpt_a = tr.Checkpoint.load(args.ckpt_a)
    ckpt_b = tr.Checkpoint.load(args.ckpt_b)
    chunk_len = args.chunk_len or int(ckpt_a.train_cfg["chunk_len"])
    lines = corp.read_lines(args.text)
    stream = corp.encode_stream(ckpt_a.vocab, lines, chunk_len)
    buckets = corp.build_buckets(ckpt_a.vocab, stream.ids, args.buckets)
    report = ev.bucket_analysis(ckpt_a, ckpt_b, stream, buckets)
    report.to_csv(args.out)
    for row in report.rows:
        print(
            f"bucket={row.bucket} freq=[{row.freq_lo},{row.freq_hi}] tokens={row.tokens} "
            f"ce_a={row.ce_a:.4f} ce_b={row.ce_b:.4f} delta={row.delta:+.4f}",
            file=sys.stderr,
        )
    print(f"report={args.out}")
    return 0


def cmd_rescore(args) -> int:
    ckpt = tr.Checkpoint.load(args.ckpt)
    nbest = ev.read_nbest(args.nbest)
    refs = None
    if args.ref:
        refs = [line.split() for line in corp.read_lines(args.ref)]
    result = ev.rescore(
        ckpt,
        nbest,
        lm_weight=args.lm_weight,
        wip=args.wip,
        state_carry=args.state_carry,
        refs=refs,
    )
    sink = open(args.out, "w", encoding="utf-8") if args.out else None
    try:
        for utt in result.utterances:
            line = f"{utt.utt}\t{' '.join(utt.words)}"
            if sink:
                sink.write(line + "\n")
            else:
                print(line, file=sys.stderr)
    finally:
        if sink:
            sink.close()
    if result.wer is not None:
        print(f"WER={result.wer:.6f}")
    else:
        print(f"utterances={len(result.utterances)}")
    return 0


def cmd_selftest(args) -> int:
    ok = st.run_selftest(emit=print)
    print(f"selftest={'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cachelm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and save the best-dev checkpoint")
    p_train.add_argument("--config", help="TOML config file")
    p_train.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--train", help="training text (one sentence per line)")
    p_train.add_argument("--dev", help="development text")
    p_train.add_argument("--test", help="optional test text, scored after training")
    p_train.add_argument("--min-count", type=int, dest="min_count")
    p_train.add_argument("--top-k", type=int, dest="top_k")
    p_train.add_argument("--chunk-len", type=int, dest="chunk_len")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument(
        "--pointer-exclude", dest="pointer_exclude", metavar="WORD[,WORD...]",
        help="tokens whose history slots are masked, e.g. 'eos,unk'",
    )
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="perplexity of a text under a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--text", required=True)
    p_eval.add_argument("--vocab", help="encode with this vocabulary file instead of the checkpoint's")
    p_eval.add_argument("--chunk-len", type=int, dest="chunk_len")
    p_eval.add_argument("--batch-streams", type=int, default=1, dest="batch_streams")
    p_eval.add_argument("--cache-len", type=int, dest="cache_len",
                        help="adapt a baseline checkpoint with a test-time cache of this length")
    p_eval.add_argument("--cache-theta", type=float, default=0.3, dest="cache_theta")
    p_eval.add_argument("--cache-lam", type=float, default=0.1, dest="cache_lam")
    p_eval.add_argument("--cache-grid", action="store_true", dest="cache_grid",
                        help="sweep theta/lam and report the best perplexity")
    p_eval.set_defaults(func=cmd_eval)

    p_an = sub.add_parser("analyze", help="frequency-bucket cross-entropy comparison")
    p_an.add_argument("--ckpt-a", required=True, dest="ckpt_a")
    p_an.add_argument("--ckpt-b", required=True, dest="ckpt_b")
    p_an.add_argument("--text", required=True)
    p_an.add_argument("--buckets", type=int, default=10)
    p_an.add_argument("--chunk-len", type=int, dest="chunk_len")
    p_an.add_argument("--out", required=True, help="CSV report path")
    p_an.set_defaults(func=cmd_analyze)

    p_rs = sub.add_parser("rescore", help="N-best rescoring with optional state carry")
    p_rs.add_argument("--ckpt", required=True)
    p_rs.add_argument("--nbest", required=True, help="JSON Lines N-best file")
    p_rs.add_argument("--lm-weight", type=float, required=True, dest="lm_weight")
    p_rs.add_argument("--wip", type=float, default=0.0, help="word insertion bonus per word")
    p_rs.add_argument("--state-carry", action=argparse.BooleanOptionalAction, default=True, dest="state_carry")
    p_rs.add_argument("--ref", help="reference transcripts, one per utterance in file order")
    p_rs.add_argument("--out", help="write selected hypotheses here")
    p_rs.set_defaults(func=cmd_rescore)

    p_st = sub.add_parser("selftest", help="run the gradient/invariant suite")
    p_st.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, IngestionError, tr.CompatibilityError, NumericError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: missing file: {err.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
