import csv
import json

from deadbranch.cli import main


def test_cli_end_to_end(tmp_path, capsys):
    corpus, emb, w = tmp_path / "c.jsonl", tmp_path / "e.bin", tmp_path / "w.dbw"
    assert main(["corpus", "synth", "--sources", "30", "--out", str(corpus)]) == 0
    assert main(["embed", "train", "--corpus", str(corpus), "--out", str(emb), "--dim", "16", "--epochs", "1"]) == 0
    assert main(["model", "train", "--family", "acfg-gnn", "--corpus", str(corpus), "--pairs", "20",
                 "--epochs", "1", "--out", str(w)]) == 0
    assert main(["model", "describe", str(w)]) == 0
    assert "family: acfg-gnn" in capsys.readouterr().out
    out = tmp_path / "run"
    args = ["attack", "run", "--attack", "spatial", "--mode", "untargeted", "--model", "acfg-gnn",
            "--dataset", "untarg", "--setting", "C1,C2", "--pairs", "3", "--cand", "20", "--c", "4",
            "--corpus", str(corpus), "--embeddings", str(emb), "--weights", str(w), "--out", str(out)]
    assert main(args) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert [r["setting"] for r in rows] == ["C1", "C2"]
    cell = out / "spatial_untargeted_acfg-gnn_untarg_C1"
    assert len(list(csv.DictReader(open(cell / "pairs.csv")))) == 3
    assert json.loads((cell / "aggregate.json").read_text())["n_total"] == 3
    # resuming reuses finished rows and reproduces the same files
    before = (cell / "pairs.csv").read_bytes()
    assert main(args) == 0
    assert (cell / "pairs.csv").read_bytes() == before


def test_cli_config_error(tmp_path, capsys):
    code = main(["attack", "run", "--attack", "graybox-greedy", "--model", "seq-embed",
                 "--corpus", str(tmp_path / "missing.jsonl")])
    assert code != 0
    assert "run." in capsys.readouterr().err
