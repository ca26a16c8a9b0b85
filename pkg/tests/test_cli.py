import os

import numpy as np
import pytest

from pnma.analysis import read_eval_report
from pnma.cli import dispatch


def run(*argv):
    return dispatch(list(argv))


class TestDispatchBasics:
    def test_help_exits_zero(self, capsys):
        assert run("--help") == 0
        out = capsys.readouterr().out
        for sub in ("prepare", "train-base", "build-memory", "train-pnma",
                    "predict", "evaluate", "analyze", "gen-synthetic"):
            assert sub in out

    def test_unknown_subcommand_usage_error(self, capsys):
        assert run("frobnicate") == 1

    def test_no_subcommand_usage_error(self):
        assert run() == 1

    def test_missing_required_flag_usage_error(self):
        assert run("prepare") == 1

    def test_unknown_config_key_exits_two(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 3\nwibble = 9\n", encoding="utf-8")
        corpus = tmp_path / "c.conll"
        corpus.write_text("a 1 B-V\n", encoding="utf-8")
        code = run("prepare", "--train", str(corpus), "--out",
                   str(tmp_path / "v.txt"), "--config", str(cfg))
        assert code == 2
        assert "wibble" in capsys.readouterr().err

    def test_missing_file_exits_two(self):
        assert run("prepare", "--train", "/nonexistent/x.conll", "--out", "/tmp/v") == 2


class TestGenSyntheticCommand:
    def test_deterministic_outputs(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        for d in (d1, d2):
            assert run(
                "gen-synthetic", "--out-dir", str(d), "--train-size", "30",
                "--valid-size", "10", "--test-size", "10",
                "--exception-rate", "0.1", "--seed", "5",
            ) == 0
        assert (d1 / "train.conll").read_bytes() == (d2 / "train.conll").read_bytes()


@pytest.fixture(scope="module")
def smoke_chain(tmp_path_factory):
    """gen-synthetic -> prepare -> train-base -> build-memory -> train-pnma
    -> predict -> evaluate, at toy scale."""
    root = tmp_path_factory.mktemp("chain")
    data = root / "data"
    args = dict(
        data=str(data),
        vocab=str(root / "vocab.txt"),
        base=str(root / "base.ckpt"),
        memory=str(root / "mem.bin"),
        pnma=str(root / "pnma.ckpt"),
        base_preds=str(root / "base_preds.conll"),
        pnma_preds=str(root / "pnma_preds.conll"),
        base_eval=str(root / "base_eval.tsv"),
        pnma_eval=str(root / "pnma_eval.tsv"),
    )
    cfg = root / "run.cfg"
    cfg.write_text(
        "epochs = 4\n"
        "batch_size = 16\n"
        "d_word = 12\n"
        "d_pred = 8\n"
        "d_hidden = 16\n"
        "n_layers = 2\n"
        "k_neighbors = 8\n"
        "memory_fraction = 0.5\n"
        "phase2_epochs = 3\n"
        "dropout_embed = 0.2\n"
        "dropout_layer = 0.05\n"
        "seed = 3\n",
        encoding="utf-8",
    )
    args["cfg"] = str(cfg)
    steps = [
        ("gen-synthetic", "--out-dir", args["data"], "--train-size", "80",
         "--valid-size", "20", "--test-size", "20", "--exception-rate", "0.1",
         "--seed", "11"),
        ("prepare", "--train", f"{args['data']}/train.conll", "--out", args["vocab"]),
        ("train-base", "--config", args["cfg"],
         "--train", f"{args['data']}/train.conll",
         "--valid", f"{args['data']}/valid.conll",
         "--vocab", args["vocab"], "--out", args["base"]),
        ("build-memory", "--checkpoint", args["base"],
         "--train", f"{args['data']}/train.conll", "--vocab", args["vocab"],
         "--out", args["memory"], "--fraction", "0.5", "--seed", "3"),
        ("train-pnma", "--config", args["cfg"], "--checkpoint", args["base"],
         "--memory", args["memory"],
         "--train", f"{args['data']}/train.conll",
         "--valid", f"{args['data']}/valid.conll",
         "--vocab", args["vocab"], "--out", args["pnma"]),
        ("predict", "--checkpoint", args["base"],
         "--input", f"{args['data']}/test.conll", "--vocab", args["vocab"],
         "--out", args["base_preds"]),
        ("predict", "--checkpoint", args["pnma"], "--memory", args["memory"],
         "--input", f"{args['data']}/test.conll", "--vocab", args["vocab"],
         "--out", args["pnma_preds"]),
        ("evaluate", "--gold", f"{args['data']}/test.conll",
         "--pred", args["base_preds"], "--out", args["base_eval"]),
        ("evaluate", "--gold", f"{args['data']}/test.conll",
         "--pred", args["pnma_preds"], "--out", args["pnma_eval"]),
    ]
    for step in steps:
        code = run(*step)
        assert code == 0, f"step {step[0]} exited {code}"
    return args


class TestSmokeChain:
    def test_produces_eval_reports(self, smoke_chain):
        report = read_eval_report(smoke_chain["pnma_eval"])
        assert 0.0 <= report.f1 <= 1.0
        assert report.scheme == "bio-span"

    def test_training_logs_written(self, smoke_chain):
        log = open(smoke_chain["base"] + ".log").read().splitlines()
        assert len(log) == 4
        assert all(len(line.split("\t")) == 6 for line in log)

    def test_pnma_checkpoint_contains_neighborhood(self, smoke_chain):
        from pnma.checkpoint import load_model

        model = load_model(smoke_chain["pnma"])
        assert model.nbr is not None
        assert model.nbr.n.shape == (8, 16)

    def test_freeze_contract_on_files(self, smoke_chain):
        from pnma.checkpoint import is_encoder_param, load_checkpoint

        base_params, _, _ = load_checkpoint(smoke_chain["base"])
        pnma_params, _, _ = load_checkpoint(smoke_chain["pnma"])
        for name, arr in base_params.items():
            if is_encoder_param(name):
                assert arr.tobytes() == pnma_params[name].tobytes(), name

    def test_predictions_parse_and_align(self, smoke_chain):
        from pnma.dataio import parse_conll_file

        gold = parse_conll_file(f"{smoke_chain['data']}/test.conll")
        preds = parse_conll_file(smoke_chain["pnma_preds"])
        assert [p.sentence_id for p in preds] == [g.sentence_id for g in gold]
        assert all(len(p) == len(g) for p, g in zip(preds, gold))

    def test_analyze_rank_dist(self, smoke_chain, tmp_path):
        out = str(tmp_path / "rank")
        code = run(
            "analyze", "rank-dist", "--checkpoint", smoke_chain["base"],
            "--memory", smoke_chain["memory"],
            "--input", f"{smoke_chain['data']}/valid.conll",
            "--vocab", smoke_chain["vocab"], "--out", out, "--k", "8",
        )
        assert code == 0
        lines = open(out + ".incorrect.tsv").read().splitlines()
        assert lines[0] == "rank\tnormalized_frequency"
        assert len(lines) == 10  # 8 ranks + absent + header

    def test_analyze_confusion_diff(self, smoke_chain, tmp_path):
        out = str(tmp_path / "conf.tsv")
        code = run(
            "analyze", "confusion-diff", "--gold", f"{smoke_chain['data']}/test.conll",
            "--pred-a", smoke_chain["base_preds"], "--pred-b", smoke_chain["pnma_preds"],
            "--out", out, "--top-n", "6",
        )
        assert code == 0
        assert open(out).readline().startswith("label\t")

    def test_analyze_disagreement(self, smoke_chain, tmp_path):
        out = str(tmp_path / "dis.tsv")
        code = run(
            "analyze", "disagreement", "--gold", f"{smoke_chain['data']}/test.conll",
            "--pred-base", smoke_chain["base_preds"],
            "--pred-pnma", smoke_chain["pnma_preds"],
            "--train", f"{smoke_chain['data']}/train.conll", "--out", out,
        )
        assert code == 0
        text = open(out).read()
        assert text.startswith("scenario\tcount")
        assert "corrected_over_regressed" in text

    def test_analyze_neighbors(self, smoke_chain, tmp_path):
        from pnma.dataio import parse_conll_file

        out = str(tmp_path / "nbr.tsv")
        valid = parse_conll_file(f"{smoke_chain['data']}/valid.conll")
        code = run(
            "analyze", "neighbors", "--checkpoint", smoke_chain["base"],
            "--memory", smoke_chain["memory"],
            "--input", f"{smoke_chain['data']}/valid.conll",
            "--vocab", smoke_chain["vocab"],
            "--sources", f"{smoke_chain['data']}/train.conll",
            "--sentence-id", valid[0].sentence_id, "--token-index", "0",
            "--out", out, "--k", "5",
        )
        assert code == 0
        lines = open(out).read().splitlines()
        assert lines[0] == "rank\tlabel\tdistance\tcontext"
        assert len(lines) == 6

    def test_rerun_train_base_is_byte_identical(self, smoke_chain, tmp_path):
        out2 = str(tmp_path / "base2.ckpt")
        code = run(
            "train-base", "--config", smoke_chain["cfg"],
            "--train", f"{smoke_chain['data']}/train.conll",
            "--valid", f"{smoke_chain['data']}/valid.conll",
            "--vocab", smoke_chain["vocab"], "--out", out2,
        )
        assert code == 0
        assert open(smoke_chain["base"], "rb").read() == open(out2, "rb").read()
        assert open(smoke_chain["base"] + ".log").read() == open(out2 + ".log").read()

    def test_train_pnma_inherits_config_from_checkpoint(self, smoke_chain, tmp_path):
        out = str(tmp_path / "p2.ckpt")
        code = run(
            "train-pnma", "--checkpoint", smoke_chain["base"],
            "--memory", smoke_chain["memory"],
            "--train", f"{smoke_chain['data']}/train.conll",
            "--vocab", smoke_chain["vocab"], "--out", out,
            "--phase2-epochs", "1",
        )
        assert code == 0
        from pnma.checkpoint import load_model

        model = load_model(out)
        assert model.config.d_hidden == 16  # inherited from the base run
        assert model.config.phase2_epochs == 1  # flag override

    def test_train_pnma_digest_mismatch_exits_two(self, smoke_chain, tmp_path, capsys):
        # the adapted checkpoint is not the one the memory was built from
        code = run(
            "train-pnma", "--checkpoint", smoke_chain["pnma"],
            "--memory", smoke_chain["memory"],
            "--train", f"{smoke_chain['data']}/train.conll",
            "--vocab", smoke_chain["vocab"],
            "--out", str(tmp_path / "x.ckpt"), "--phase2-epochs", "1",
        )
        assert code == 2

    def test_predict_pnma_without_memory_is_config_error(self, smoke_chain, tmp_path):
        code = run(
            "predict", "--checkpoint", smoke_chain["pnma"],
            "--input", f"{smoke_chain['data']}/test.conll",
            "--vocab", smoke_chain["vocab"], "--out", str(tmp_path / "x.conll"),
        )
        assert code == 2


class TestEvaluateCommand:
    def test_mismatched_corpora_exit_two(self, tmp_path):
        a = tmp_path / "a.conll"
        b = tmp_path / "b.conll"
        a.write_text("x 1 B-V\n\ny 1 B-V\n", encoding="utf-8")
        b.write_text("x 1 B-V\n", encoding="utf-8")
        code = run("evaluate", "--gold", str(a), "--pred", str(b),
                   "--out", str(tmp_path / "r.tsv"))
        assert code == 2

    def test_per_token_scheme(self, tmp_path):
        gold = tmp_path / "g.conll"
        pred = tmp_path / "p.conll"
        gold.write_text("he 0 A0\nruns 1 _\n", encoding="utf-8")
        pred.write_text("he 0 A0\nruns 1 A1\n", encoding="utf-8")
        out = str(tmp_path / "r.tsv")
        assert run("evaluate", "--gold", str(gold), "--pred", str(pred),
                   "--out", out, "--scheme", "per-token-role") == 0
        report = read_eval_report(out)
        assert report.scheme == "per-token-role"
        assert report.precision == pytest.approx(0.5)
        assert report.recall == pytest.approx(1.0)
