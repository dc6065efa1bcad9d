"""Command-line interface, end to end on a tiny corpus."""

import json

import pytest

from cachelm.cli import main
from cachelm.numcore import RngState


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = RngState(0).generator()

    def make_lines(n, seed_offset=0):
        g = RngState(seed_offset).generator()
        lines = []
        for _ in range(n):
            words = [f"w{int(i)}" for i in g.integers(0, 12, size=9)]
            r = f"r{int(g.integers(0, 6))}"
            words[3] = r
            words[6] = r
            lines.append(" ".join(words))
        return lines

    (root / "train.txt").write_text("\n".join(make_lines(150, 1)) + "\n")
    (root / "dev.txt").write_text("\n".join(make_lines(30, 2)) + "\n")
    (root / "test.txt").write_text("\n".join(make_lines(30, 3)) + "\n")
    (root / "tiny.toml").write_text(
        "\n".join(
            [
                "[backbone]",
                "hidden = 12",
                "layers = 1",
                "dropout = 0.0",
                "[pointer]",
                "window = 6",
                "[train]",
                "epochs = 2",
                "batch_streams = 4",
                "seed = 9",
                "precision = 64",
            ]
        )
        + "\n"
    )
    del gen
    return root


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def train_once(workdir, capsys, out_name, *extra):
    code, out, err = run_cli(
        capsys,
        "train",
        "--config", str(workdir / "tiny.toml"),
        "--train", str(workdir / "train.txt"),
        "--dev", str(workdir / "dev.txt"),
        "--out", str(workdir / out_name),
        *extra,
    )
    assert code == 0, err
    final = out.strip().splitlines()[-1]
    assert final.startswith("ckpt=")
    return final.split("=", 1)[1], err


class TestTrain:
    def test_writes_checkpoint_and_vocab(self, workdir, capsys):
        ckpt, err = train_once(workdir, capsys, "run1")
        assert (workdir / "run1" / "best.ckpt").exists()
        assert (workdir / "run1" / "vocab.tsv").exists()
        assert "config train.epochs=2" in err
        epoch_lines = [l for l in err.splitlines() if l.startswith("epoch=")]
        assert len(epoch_lines) == 2
        assert "train_ppl=" in epoch_lines[0] and "lr=" in epoch_lines[0] and "sec=" in epoch_lines[0]

    def test_same_seed_byte_identical_checkpoints(self, workdir, capsys):
        train_once(workdir, capsys, "det_a")
        train_once(workdir, capsys, "det_b")
        a = (workdir / "det_a" / "best.ckpt").read_bytes()
        b = (workdir / "det_b" / "best.ckpt").read_bytes()
        assert a == b

    def test_transformer_backbone_end_to_end(self, workdir, capsys):
        ckpt, err = train_once(
            workdir, capsys, "tf_run",
            "--set", "backbone.backbone=\"transformer\"",
            "--set", "backbone.hidden=8",
            "--set", "backbone.layers=1",
            "--set", "backbone.heads=2",
            "--set", "train.epochs=1",
        )
        assert "config backbone.backbone=transformer" in err
        code, out, _ = run_cli(capsys, "eval", "--ckpt", ckpt, "--text", str(workdir / "test.txt"))
        assert code == 0
        assert out.strip().splitlines()[-1].startswith("ppl=")

    def test_env_seed_overrides(self, workdir, capsys, monkeypatch):
        monkeypatch.setenv("CACHELM_SEED", "777")
        _, err = train_once(workdir, capsys, "env_seed")
        assert "config train.seed=777" in err

    def test_set_overrides_shadow_file(self, workdir, capsys):
        _, err = train_once(workdir, capsys, "set_o", "--set", "train.epochs=1")
        assert "config train.epochs=1" in err

    def test_pointer_exclude_flag(self, workdir, capsys):
        ckpt, err = train_once(
            workdir, capsys, "excl",
            "--set", "train.epochs=1", "--pointer-exclude", "eos,unk",
        )
        assert "config pointer.exclude=['eos', 'unk']" in err
        from cachelm.training import Checkpoint

        loaded = Checkpoint.load(ckpt)
        model = loaded.to_model()
        assert model.head.exclude_ids == frozenset(
            {loaded.vocab.eos_id, loaded.vocab.unk_id}
        )

    def test_unknown_config_key_rejected(self, workdir, capsys):
        code, _, err = run_cli(
            capsys, "train",
            "--config", str(workdir / "tiny.toml"),
            "--set", "train.bogus=1",
            "--out", str(workdir / "x"),
        )
        assert code == 1
        assert "unknown config key" in err

    def test_missing_corpus_is_error(self, workdir, capsys):
        code, _, err = run_cli(
            capsys, "train", "--config", str(workdir / "tiny.toml"),
            "--out", str(workdir / "y"),
        )
        assert code == 1 and "error:" in err


class TestEval:
    def test_prints_ppl(self, workdir, capsys):
        ckpt, _ = train_once(workdir, capsys, "eval_run")
        code, out, err = run_cli(capsys, "eval", "--ckpt", ckpt, "--text", str(workdir / "test.txt"))
        assert code == 0
        final = out.strip().splitlines()[-1]
        assert final.startswith("ppl=")
        assert float(final.split("=")[1]) > 1.0

    def test_cache_adaptation_flags(self, workdir, capsys):
        ckpt, _ = train_once(
            workdir, capsys, "cache_base",
            "--set", "pointer.enabled=false", "--set", "pointer.window=0",
        )
        code, out, err = run_cli(
            capsys, "eval", "--ckpt", ckpt, "--text", str(workdir / "test.txt"),
            "--cache-len", "8", "--cache-theta", "0.3", "--cache-lam", "0.1",
        )
        assert code == 0
        assert out.strip().splitlines()[-1].startswith("ppl=")

    def test_cache_grid_sweep(self, workdir, capsys):
        ckpt, _ = train_once(
            workdir, capsys, "cache_grid",
            "--set", "pointer.enabled=false", "--set", "pointer.window=0",
        )
        code, out, err = run_cli(
            capsys, "eval", "--ckpt", ckpt, "--text", str(workdir / "test.txt"),
            "--cache-len", "6", "--cache-grid",
        )
        assert code == 0
        assert "best_theta=" in err
        sweep_lines = [l for l in err.splitlines() if l.startswith("cache theta=")]
        assert len(sweep_lines) == 20
        best = min(float(l.rsplit("ppl=", 1)[1]) for l in sweep_lines)
        assert float(out.strip().splitlines()[-1].split("=")[1]) == pytest.approx(best, abs=1e-6)

    def test_mismatched_vocab_names_both_hashes(self, workdir, capsys):
        ckpt, _ = train_once(workdir, capsys, "mismatch")
        alien = workdir / "alien_vocab.tsv"
        alien.write_text("<unk>\t0\t5\n</s>\t1\t5\nzzz\t2\t1\n")
        code, out, err = run_cli(
            capsys, "eval", "--ckpt", ckpt, "--text", str(workdir / "test.txt"),
            "--vocab", str(alien),
        )
        assert code == 1
        from cachelm.corpus import Vocabulary
        from cachelm.training import Checkpoint

        h_alien = Vocabulary.load(alien).content_hash()
        h_ckpt = Checkpoint.load(ckpt).vocab_hash
        assert h_alien in err and h_ckpt in err


class TestAnalyze:
    def test_writes_csv_report(self, workdir, capsys):
        ckpt_a, _ = train_once(workdir, capsys, "an_a")
        ckpt_b, _ = train_once(workdir, capsys, "an_b", "--set", "pointer.enabled=false", "--set", "pointer.window=0")
        out_csv = workdir / "report.csv"
        code, out, err = run_cli(
            capsys, "analyze", "--ckpt-a", ckpt_a, "--ckpt-b", ckpt_b,
            "--text", str(workdir / "test.txt"), "--buckets", "4",
            "--out", str(out_csv),
        )
        assert code == 0
        assert out.strip().splitlines()[-1] == f"report={out_csv}"
        lines = out_csv.read_text().strip().splitlines()
        assert len(lines) == 5  # header + 4 buckets


class TestRescore:
    def _nbest_file(self, workdir):
        path = workdir / "nbest.jsonl"
        rows = [
            {"utt": "u1", "conv": "c1", "hyps": [
                {"words": ["w1", "r2", "w3"], "score": 0.0},
                {"words": ["w1", "w2"], "score": -0.1},
            ]},
            {"utt": "u2", "conv": "c1", "hyps": [
                {"words": ["r2", "w4"], "score": 0.0},
                {"words": ["w5", "w4"], "score": -0.05},
            ]},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        refs = workdir / "refs.txt"
        refs.write_text("w1 r2 w3\nr2 w4\n")
        return path, refs

    def test_lm_weight_zero_selects_first_pass_and_reports_wer(self, workdir, capsys):
        ckpt, _ = train_once(workdir, capsys, "rs")
        nbest, refs = self._nbest_file(workdir)
        out_path = workdir / "selected.txt"
        code, out, err = run_cli(
            capsys, "rescore", "--ckpt", ckpt, "--nbest", str(nbest),
            "--lm-weight", "0", "--ref", str(refs), "--out", str(out_path),
        )
        assert code == 0
        final = out.strip().splitlines()[-1]
        assert final.startswith("WER=")
        chosen = [line.split("\t")[1] for line in out_path.read_text().strip().splitlines()]
        assert chosen == ["w1 r2 w3", "r2 w4"]
        assert float(final.split("=")[1]) == pytest.approx(0.0)

    def test_without_refs_reports_utterance_count(self, workdir, capsys):
        ckpt, _ = train_once(workdir, capsys, "rs2")
        nbest, _ = self._nbest_file(workdir)
        code, out, err = run_cli(
            capsys, "rescore", "--ckpt", ckpt, "--nbest", str(nbest),
            "--lm-weight", "0.5", "--no-state-carry",
        )
        assert code == 0
        assert out.strip().splitlines()[-1] == "utterances=2"


class TestSelftestCommand:
    def test_runs_and_reports(self, capsys):
        code, out, err = run_cli(capsys, "selftest")
        lines = out.strip().splitlines()
        assert lines[-1] == "selftest=PASS"
        assert code == 0
        assert sum(1 for l in lines if l.startswith("PASS ")) >= 12


class TestUsage:
    def test_unknown_subcommand_exits_nonzero(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as err:
            main(["eval", "--text", "x.txt"])
        assert err.value.code == 2
