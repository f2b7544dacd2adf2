import os
import time

import numpy as np
import pytest

from decaylab import cli
from decaylab import recurrence
from decaylab.decay import ConfigError


TINY_CONFIG = """\
# smoke experiment
[model]
n_layers = 1
hidden = 16
heads = 2

[decay]
strategy = simple
p = 0.99

[train]
total_steps = 3
batch_size = 2
seq_len = 24
val_every = 0

[probe]
length = 64
"""


def _write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_parse_empty_config_is_all_defaults(tmp_path):
    cfg = cli.parse_config(_write(tmp_path, ""))
    assert cfg.model.n_layers == 2
    assert cfg.model.decay.strategy == "mamba2"
    assert cfg.train.total_steps == 1000
    assert cfg.probe_length == 2048
    assert cfg.corpus is None


def test_parse_config_sections(tmp_path):
    cfg = cli.parse_config(_write(tmp_path, TINY_CONFIG))
    assert cfg.model.hidden == 16
    assert cfg.model.decay.strategy == "simple"
    assert cfg.model.decay.p == 0.99
    assert cfg.train.total_steps == 3
    assert cfg.probe_length == 64


def test_parse_config_vector_mamba2(tmp_path):
    cfg = cli.parse_config(_write(tmp_path,
                                  "[decay]\nstrategy = mamba2\ngranularity = vector\n"))
    assert cfg.model.decay.strategy == "mamba2"
    assert cfg.model.decay.granularity == "vector"


def test_parse_config_rejects_tnl_vector(tmp_path):
    with pytest.raises(ConfigError):
        cli.parse_config(_write(tmp_path,
                                "[decay]\nstrategy = tnl\ngranularity = vector\n"))


def test_parse_config_unknown_key_names_line(tmp_path):
    text = "[model]\nhidden = 16\nwat = 3\n"
    with pytest.raises(ConfigError) as exc:
        cli.parse_config(_write(tmp_path, text))
    assert "line 3" in str(exc.value)
    assert "wat" in str(exc.value)


def test_parse_config_unknown_section(tmp_path):
    with pytest.raises(ConfigError) as exc:
        cli.parse_config(_write(tmp_path, "[optimizer]\nlr = 1\n"))
    assert "line 1" in str(exc.value)


def test_parse_config_key_outside_section(tmp_path):
    with pytest.raises(ConfigError):
        cli.parse_config(_write(tmp_path, "hidden = 16\n"))


def test_parse_config_type_error_names_line(tmp_path):
    with pytest.raises(ConfigError) as exc:
        cli.parse_config(_write(tmp_path, "[model]\nhidden = many\n"))
    assert "line 2" in str(exc.value)


def test_parse_config_comments_and_bools(tmp_path):
    text = "[model]\ntie_embeddings = true  # share weights\n"
    cfg = cli.parse_config(_write(tmp_path, text))
    assert cfg.model.tie_embeddings is True


def test_resolved_config_round_trips(tmp_path, corpus_path):
    cfg_path = _write(tmp_path, TINY_CONFIG)
    out = tmp_path / "run"
    code = cli.main(["train", "--config", cfg_path, "--corpus", corpus_path,
                     "--out", str(out)])
    assert code == 0
    resolved = out / "config_resolved.txt"
    assert resolved.exists()
    cfg2 = cli.parse_config(str(resolved))
    assert cfg2.model.hidden == 16
    assert cfg2.model.decay.strategy == "simple"
    assert cfg2.train.total_steps == 3


def test_cmd_train_smoke(tmp_path, corpus_path):
    cfg_path = _write(tmp_path, TINY_CONFIG)
    out = tmp_path / "run"
    code = cli.main(["train", "--config", cfg_path, "--corpus", corpus_path,
                     "--out", str(out)])
    assert code == 0
    lines = (out / "metrics.txt").read_text().strip().split("\n")
    assert len(lines) == 3
    assert (out / "ckpt_final.bin").exists()


def test_cmd_train_missing_corpus(tmp_path, capsys):
    cfg_path = _write(tmp_path, TINY_CONFIG)
    code = cli.main(["train", "--config", cfg_path, "--corpus",
                     "/no/such/corpus.txt", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "/no/such/corpus.txt" in capsys.readouterr().err


def test_cmd_train_seed_flag_overrides(tmp_path, corpus_path):
    cfg_path = _write(tmp_path, TINY_CONFIG)
    out1, out2, out3 = (tmp_path / n for n in ("r1", "r2", "r3"))
    assert cli.main(["train", "--config", cfg_path, "--corpus", corpus_path,
                     "--out", str(out1), "--seed", "7"]) == 0
    assert cli.main(["train", "--config", cfg_path, "--corpus", corpus_path,
                     "--out", str(out2), "--seed", "7"]) == 0
    assert cli.main(["train", "--config", cfg_path, "--corpus", corpus_path,
                     "--out", str(out3), "--seed", "8"]) == 0
    m1 = (out1 / "metrics.txt").read_bytes()
    assert m1 == (out2 / "metrics.txt").read_bytes()
    assert m1 != (out3 / "metrics.txt").read_bytes()
    assert "seed = 7" in (out1 / "config_resolved.txt").read_text()


def test_cmd_train_bad_config(tmp_path, corpus_path, capsys):
    cfg_path = _write(tmp_path, "[decay]\nstrategy = tnl\ngranularity = vector\n")
    code = cli.main(["train", "--config", cfg_path, "--corpus", corpus_path,
                     "--out", str(tmp_path / "o")])
    assert code == 2


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, corpus_path):
    tmp = tmp_path_factory.mktemp("cli_run")
    cfg_path = str(tmp / "exp.cfg")
    with open(cfg_path, "w") as f:
        f.write(TINY_CONFIG)
    out = tmp / "run"
    assert cli.main(["train", "--config", cfg_path, "--corpus", corpus_path,
                     "--out", str(out)]) == 0
    return out


def test_cmd_probe_outputs(trained_run, corpus_path, tmp_path):
    out = tmp_path / "probe"
    code = cli.main(["probe", str(trained_run / "ckpt_final.bin"), corpus_path,
                     "--out", str(out), "--length", "64"])
    assert code == 0
    assert (out / "decay_medians.csv").exists()
    assert (out / "decay_medians.svg").exists()
    rows = (out / "decay_medians.csv").read_text().strip().split("\n")
    assert len(rows) == 2  # header + one layer


def test_cmd_probe_deterministic(trained_run, corpus_path, tmp_path):
    o1, o2 = tmp_path / "p1", tmp_path / "p2"
    for o in (o1, o2):
        assert cli.main(["probe", str(trained_run / "ckpt_final.bin"),
                         corpus_path, "--out", str(o), "--length", "64"]) == 0
    assert (o1 / "decay_medians.csv").read_bytes() == (o2 / "decay_medians.csv").read_bytes()
    assert (o1 / "decay_medians.svg").read_bytes() == (o2 / "decay_medians.svg").read_bytes()


def test_cmd_probe_missing_checkpoint(tmp_path, corpus_path, capsys):
    code = cli.main(["probe", str(tmp_path / "none.bin"), corpus_path,
                     "--out", str(tmp_path / "o")])
    assert code == 2


def test_cmd_probe_decay_none_rejected(tmp_path, corpus_path, capsys):
    cfg = TINY_CONFIG.replace("strategy = simple\np = 0.99", "strategy = none")
    cfg_path = _write(tmp_path, cfg)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg_path, "--corpus", corpus_path,
                     "--out", str(out)]) == 0
    code = cli.main(["probe", str(out / "ckpt_final.bin"), corpus_path,
                     "--out", str(tmp_path / "p")])
    assert code == 3
    assert "decay" in capsys.readouterr().err


def test_cmd_probe_tnl_medians(tmp_path, corpus_path):
    from decaylab.decay import tnl_decay
    cfg = TINY_CONFIG.replace("n_layers = 1", "n_layers = 2").replace(
        "strategy = simple\np = 0.99", "strategy = tnl\ngranularity = scalar")
    cfg_path = _write(tmp_path, cfg)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg_path, "--corpus", corpus_path,
                     "--out", str(out)]) == 0
    probe_out = tmp_path / "p"
    assert cli.main(["probe", str(out / "ckpt_final.bin"), corpus_path,
                     "--out", str(probe_out), "--length", "64"]) == 0
    rows = (probe_out / "decay_medians.csv").read_text().strip().split("\n")[1:]
    for row in rows:
        fields = row.split(",")
        layer = int(fields[0])
        expected = np.mean([tnl_decay(j, 2, layer + 1, 2) for j in (1, 2)])
        assert abs(float(fields[3]) - expected) <= 1e-9


def test_cmd_verify_quick_passes_under_budget(capsys):
    start = time.time()
    code = cli.main(["verify", "--level", "quick"])
    elapsed = time.time() - start
    assert code == 0
    assert elapsed < 60.0
    out = capsys.readouterr().out
    assert "PASS chunked-vs-sequential" in out


def test_cmd_verify_detects_corrupted_chunked_kernel(monkeypatch, capsys):
    real = recurrence.forward_chunked

    def corrupted(q, k, v, lam, chunk):
        return real(q, k, v, lam, chunk) + 1e-3

    monkeypatch.setattr(recurrence, "forward_chunked", corrupted)
    code = cli.main(["verify", "--level", "quick"])
    assert code == 1
    out = capsys.readouterr().out
    assert "FAIL chunked-vs-sequential" in out
    assert "chunked-vs-sequential" in out.split("verification failed:")[-1]


def test_cmd_export(trained_run, tmp_path, capsys):
    out = tmp_path / "export"
    code = cli.main(["export", str(trained_run / "ckpt_final.bin"),
                     "--out", str(out)])
    assert code == 0
    text = (out / "strategy_summary.txt").read_text()
    assert "simple" in text
    assert "sigmoid(f + delta)" in text
    assert "decay.delta" in text
    printed = capsys.readouterr().out
    assert "strategy summary" in printed


def test_cmd_export_missing_checkpoint(tmp_path, capsys):
    assert cli.main(["export", str(tmp_path / "none.bin")]) == 2


def test_cli_writes_only_inside_out_dir(tmp_path, corpus_path):
    cfg_path = _write(tmp_path, TINY_CONFIG)
    out = tmp_path / "only"
    before = set(os.listdir(tmp_path))
    assert cli.main(["train", "--config", cfg_path, "--corpus", corpus_path,
                     "--out", str(out)]) == 0
    after = set(os.listdir(tmp_path))
    assert after - before == {"only"}
