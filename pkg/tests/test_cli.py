import numpy as np
import pytest

from diacritizer import cli
from diacritizer import evaluation as ev
from diacritizer import models as md
from diacritizer import textdata as td
from conftest import toy_corpus, ACUTE


def write(path, lines):
    path.write_text("".join(f"{l}\n" for l in lines), encoding="utf-8")
    return str(path)


def rule_corpus(n, seed, letters="abcd"):
    """Learnable toy language: acute on a character iff the next character
    in the same word is 'b'."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        words = []
        for _ in range(rng.integers(2, 4, endpoint=True)):
            chars = [letters[rng.integers(0, len(letters))] for _ in range(rng.integers(2, 4, endpoint=True))]
            marked = [
                ch + (ACUTE if i + 1 < len(chars) and chars[i + 1] == "b" else "")
                for i, ch in enumerate(chars)
            ]
            words.append("".join(marked))
        out.append(" ".join(words))
    return out


SMALL = [
    "--hidden", "12", "--embedding-dim", "8", "--kernel-size", "3",
    "--batch-size", "64", "--dropout", "0.1",
]


def train_small(tmp_path, corpus_lines, dev_lines, out_name, arch="atcn", seed=3,
                epochs=3, extra=()):
    train_p = write(tmp_path / "train.txt", corpus_lines)
    dev_p = write(tmp_path / "dev.txt", dev_lines)
    out = str(tmp_path / out_name)
    code = cli.main(
        ["train", "--arch", arch, "--train", train_p, "--dev", dev_p, "--out", out,
         "--seed", str(seed), "--epochs", str(epochs), "--threshold", "0", *SMALL, *extra]
    )
    assert code == 0
    return out


class TestPrepare:
    def test_empty_input_succeeds(self, tmp_path, capsys):
        inp = write(tmp_path / "in.txt", [])
        out = str(tmp_path / "out.txt")
        assert cli.main(["prepare", "--input", inp, "--output", out]) == 0
        assert "kept=0" in capsys.readouterr().out
        assert (tmp_path / "out.txt").read_text() == ""

    def test_default_rules_applied(self, tmp_path, capsys):
        lines = [
            "abcdefghijk yá",          # 11-char word
            "plain words",                    # no diacritic
            " ".join(["á"] * 71),      # 71 words
            "képt here",
        ]
        inp = write(tmp_path / "in.txt", lines)
        out = str(tmp_path / "out.txt")
        assert cli.main(["prepare", "--input", inp, "--output", out]) == 0
        text = capsys.readouterr().out
        assert "read=4 kept=1" in text
        assert "rejected_word_length=1" in text
        assert "rejected_no_diacritic=1" in text
        assert "rejected_sentence_length=1" in text

    def test_word_count_matches_independent_recount(self, tmp_path, capsys):
        lines = toy_corpus(25, seed=7)
        inp = write(tmp_path / "in.txt", lines)
        out = str(tmp_path / "out.txt")
        assert cli.main(["prepare", "--input", inp, "--output", out]) == 0
        stats = capsys.readouterr().out
        # wc-style recount over the emitted file
        kept_lines = (tmp_path / "out.txt").read_text(encoding="utf-8").splitlines()
        recount = sum(len(l.split()) for l in kept_lines)
        assert f"word_tokens={recount}" in stats

    def test_unreadable_input_is_data_error(self, tmp_path):
        assert cli.main(
            ["prepare", "--input", str(tmp_path / "none.txt"), "--output", str(tmp_path / "o")]
        ) == 2

    def test_inputs_never_mutated(self, tmp_path):
        lines = toy_corpus(10, seed=3)
        inp = write(tmp_path / "in.txt", lines)
        before = (tmp_path / "in.txt").read_bytes()
        cli.main(["prepare", "--input", inp, "--output", str(tmp_path / "out.txt")])
        assert (tmp_path / "in.txt").read_bytes() == before


class TestTrainCommand:
    def test_parser_defaults_reproduce_reference_configuration(self):
        args = cli.build_parser().parse_args(
            ["train", "--arch", "atcn", "--train", "t", "--dev", "d", "--out", "o"]
        )
        assert args.num_layers == 3
        assert args.hidden is None  # resolves to 500 for conv archs
        assert args.kernel_size == 5
        assert args.embedding_dim == 45
        assert args.dropout == 0.5
        assert args.lr == 0.001
        assert args.window == 10
        assert args.max_word_chars == 10 and args.max_words == 70
        assert md.ModelConfig("atcn", 10, 3).hidden == 500
        assert md.ModelConfig("lstm", 10, 3).hidden == 250

    def test_unknown_arch_is_usage_error(self, tmp_path):
        code = cli.main(
            ["train", "--arch", "rnn", "--train", "x", "--dev", "y", "--out", "z"]
        )
        assert code == 1

    def test_missing_corpus_is_data_error(self, tmp_path):
        code = cli.main(
            ["train", "--arch", "tcn", "--train", str(tmp_path / "nope"), "--dev",
             str(tmp_path / "nope"), "--out", str(tmp_path / "m")]
        )
        assert code == 2

    def test_empty_post_filter_corpus_is_data_error(self, tmp_path):
        train_p = write(tmp_path / "train.txt", ["plain words no marks"])
        dev_p = write(tmp_path / "dev.txt", ["dév"])
        code = cli.main(
            ["train", "--arch", "tcn", "--train", train_p, "--dev", dev_p,
             "--out", str(tmp_path / "m")]
        )
        assert code == 2

    def test_same_seed_byte_identical_checkpoints(self, tmp_path, capsys):
        corpus = toy_corpus(20, seed=5)
        dev = toy_corpus(5, seed=6)
        a = train_small(tmp_path, corpus, dev, "a.ckpt", seed=9, epochs=2)
        b = train_small(tmp_path, corpus, dev, "b.ckpt", seed=9, epochs=2)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_artifacts_written(self, tmp_path, capsys):
        corpus = toy_corpus(20, seed=5)
        dev = toy_corpus(5, seed=6)
        out = train_small(tmp_path, corpus, dev, "m.ckpt", epochs=2)
        assert (tmp_path / "m.ckpt").exists()
        assert (tmp_path / "m.ckpt.seen").exists()
        log_lines = (tmp_path / "m.ckpt.log").read_text().strip().split("\n")
        assert len(log_lines) == 2
        loaded = md.load_model(out)
        assert loaded.config.arch == "atcn"

    def test_convergence_stops_before_max_epochs(self, tmp_path, capsys):
        corpus = rule_corpus(60, seed=11)
        dev = rule_corpus(12, seed=12)
        train_p = write(tmp_path / "train.txt", corpus)
        dev_p = write(tmp_path / "dev.txt", dev)
        out = str(tmp_path / "m.ckpt")
        code = cli.main(
            ["train", "--arch", "atcn", "--train", train_p, "--dev", dev_p,
             "--out", out, "--seed", "1", "--epochs", "40", *SMALL]
        )
        assert code == 0
        log_lines = (tmp_path / "m.ckpt.log").read_text().strip().split("\n")
        assert len(log_lines) < 40


@pytest.fixture(scope="module")
def memorizing_model(tmp_path_factory):
    """A small model trained until it reproduces its toy training corpus."""
    tmp_path = tmp_path_factory.mktemp("memorize")
    corpus = rule_corpus(80, seed=21)
    dev = rule_corpus(16, seed=22)
    out = train_small(
        tmp_path, corpus, dev, "m.ckpt", seed=2, epochs=30,
        extra=("--dropout", "0.0", "--hidden", "24", "--lr", "0.005",
               "--batch-size", "32"),
    )
    return tmp_path, out, corpus


class TestDiacritizeCommand:
    def test_empty_input_empty_output(self, memorizing_model, tmp_path):
        _, model_path, _ = memorizing_model
        inp = write(tmp_path / "in.txt", [])
        out = str(tmp_path / "out.txt")
        assert cli.main(["diacritize", "--model", model_path, "--input", inp, "--output", out]) == 0
        assert (tmp_path / "out.txt").read_text() == ""

    def test_base_characters_preserved(self, memorizing_model, tmp_path, capsys):
        _, model_path, _ = memorizing_model
        lines = ["abc bab", "", "cab ba"]
        inp = write(tmp_path / "in.txt", lines)
        out = str(tmp_path / "out.txt")
        assert cli.main(["diacritize", "--model", model_path, "--input", inp, "--output", out]) == 0
        produced = (tmp_path / "out.txt").read_text(encoding="utf-8").split("\n")[:-1]
        assert len(produced) == len(lines)
        for src, dst in zip(lines, produced):
            assert td.strip_diacritics(dst) == td.strip_diacritics(src)
        assert produced[1] == ""

    def test_existing_marks_stripped_and_noted(self, memorizing_model, tmp_path, capsys):
        _, model_path, _ = memorizing_model
        inp = write(tmp_path / "in.txt", ["báb"])
        out = str(tmp_path / "out.txt")
        assert cli.main(["diacritize", "--model", model_path, "--input", inp, "--output", out]) == 0
        assert "stripped 1 pre-existing marks" in capsys.readouterr().out

    def test_idempotent_modulo_stripping(self, memorizing_model, tmp_path):
        _, model_path, corpus = memorizing_model
        inp = write(tmp_path / "in.txt", [td.strip_diacritics(l) for l in corpus[:10]])
        out1 = str(tmp_path / "out1.txt")
        out2 = str(tmp_path / "out2.txt")
        cli.main(["diacritize", "--model", model_path, "--input", inp, "--output", out1])
        cli.main(["diacritize", "--model", model_path, "--input", out1, "--output", out2])
        assert (tmp_path / "out1.txt").read_text() == (tmp_path / "out2.txt").read_text()

    def test_memorized_corpus_reproduced(self, memorizing_model, tmp_path):
        mdir, model_path, corpus = memorizing_model
        sample = corpus[:30]
        inp = write(tmp_path / "in.txt", [td.strip_diacritics(l) for l in sample])
        out = str(tmp_path / "out.txt")
        assert cli.main(["diacritize", "--model", model_path, "--input", inp, "--output", out]) == 0
        produced = (tmp_path / "out.txt").read_text(encoding="utf-8").splitlines()
        import unicodedata
        expected = [unicodedata.normalize("NFC", l) for l in sample]
        assert produced == expected


class TestEvaluateCommand:
    def test_gold_input_scores_zero(self, memorizing_model, tmp_path, capsys):
        mdir, model_path, corpus = memorizing_model
        # evaluate the model on its own output: DER and WER must be zero
        inp = write(tmp_path / "in.txt", [td.strip_diacritics(l) for l in corpus[:20]])
        own = str(tmp_path / "own.txt")
        cli.main(["diacritize", "--model", model_path, "--input", inp, "--output", own])
        report_p = str(tmp_path / "report.txt")
        code = cli.main(
            ["evaluate", "--model", model_path, "--test", own,
             "--seen-words", model_path + ".seen", "--report", report_p]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "DER\tWER\tOOV\tFINAL" in out
        assert "0.00%\t0.00%" in out
        report = (tmp_path / "report.txt").read_text()
        assert "der=0.000000" in report and "wer=0.000000" in report

    def test_missing_seen_words_warns_not_errors(self, memorizing_model, tmp_path, capsys):
        mdir, model_path, corpus = memorizing_model
        test_p = write(tmp_path / "t.txt", corpus[:5])
        code = cli.main(
            ["evaluate", "--model", model_path, "--test", test_p,
             "--report", str(tmp_path / "r.txt")]
        )
        assert code == 0
        captured = capsys.readouterr()
        assert "OOV metric disabled" in captured.err
        assert "oov_wer=NA" in (tmp_path / "r.txt").read_text()

    def test_report_der_matches_diff_recomputation(self, memorizing_model, tmp_path, capsys):
        mdir, model_path, corpus = memorizing_model
        fresh = rule_corpus(15, seed=77)
        test_p = write(tmp_path / "t.txt", fresh)
        report_p = tmp_path / "r.txt"
        diff_p = tmp_path / "d.txt"
        code = cli.main(
            ["evaluate", "--model", model_path, "--test", test_p,
             "--report", str(report_p), "--diff", str(diff_p)]
        )
        assert code == 0
        total = wrong = 0
        for line in diff_p.read_text(encoding="utf-8").splitlines():
            gold_col, pred_col = line.split("\t")
            for gw, pw in zip(td.decompose(gold_col).words, td.decompose(pred_col).words):
                for (_, gl), (_, pl) in zip(gw, pw):
                    total += 1
                    wrong += gl != pl
        reported = float(
            [l for l in report_p.read_text().splitlines() if l.startswith("der=")][0][4:]
        )
        assert reported == pytest.approx(wrong / total, abs=1e-6)

    def test_corrupt_checkpoint_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        code = cli.main(
            ["evaluate", "--model", str(bad), "--test", "x", "--report", "y"]
        )
        assert code == 2


class TestBenchCommand:
    def test_single_model_row_no_ratios(self, memorizing_model, tmp_path, capsys):
        mdir, model_path, corpus = memorizing_model
        inp = write(tmp_path / "in.txt", corpus[:20])
        code = cli.main(
            ["bench", "--models", model_path, "--input", inp, "--repeats", "2"]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "Model\tTime(s)\tChars/min" in out
        assert "Comparison" not in out

    def test_identical_checkpoints_near_zero_efficiency(self, memorizing_model, tmp_path, capsys):
        mdir, model_path, corpus = memorizing_model
        import shutil
        twin = str(tmp_path / "twin.ckpt")
        shutil.copy(model_path, twin)
        # passes must be long enough that scheduler jitter stays under the bound
        inp = write(
            tmp_path / "in.txt",
            toy_corpus(800, seed=9, letters="abcd", words_range=(3, 6)),
        )
        code = cli.main(
            ["bench", "--models", f"{model_path},{twin}", "--input", inp,
             "--repeats", "5", "--batch-size", "64"]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "Time\tSpeedup\tEfficiency" in out
        comparison = out.strip().split("\n")[-1]
        efficiency = float(comparison.split("\t")[-1].rstrip("%")) / 100
        assert abs(efficiency) <= 0.10

    def test_empty_corpus_is_data_error(self, memorizing_model, tmp_path):
        mdir, model_path, corpus = memorizing_model
        inp = write(tmp_path / "in.txt", [])
        assert cli.main(["bench", "--models", model_path, "--input", inp]) == 2
