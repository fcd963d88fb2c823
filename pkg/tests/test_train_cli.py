import json

import numpy as np
import pytest

from voxelformer import checkpoint as ckpt_io
from voxelformer.cli import main
from voxelformer.config import TrainConfig, format_config, parse_config
from voxelformer.data import generate
from voxelformer.errors import ConfigError, ContractError, NonFiniteError
from voxelformer.model import ModelConfig, VoxelFormer
from voxelformer.nn import Linear
from voxelformer.train import count_params, load_trained, train

TINY_TEXT = """
# a tiny run that finishes in seconds
epochs = 3
batch_size = 8
lr = 0.002
eval_pool_size = 10
eval_trials = 3
model.dim = 8
model.heads = 2
model.layers = 1
model.merge = 2
model.queries = 2
model.qformer_layers = 1
model.prior_layers = 1
model.hidden_mult = 2
model.projector_hidden = 8
model.retrieval_dim = 6
model.target_dim = 6
model.pe_hidden = 8
data.subjects = 2
data.voxel_counts = 10, 12
data.train_stimuli = 24
data.test_stimuli = 12
data.target_dim = 6
"""


def tiny_config() -> TrainConfig:
    return parse_config(TINY_TEXT)


# -- config ---------------------------------------------------------------


def test_parse_config_types_and_comments():
    cfg = tiny_config()
    assert cfg.epochs == 3 and cfg.lr == 0.002 and cfg.model.dim == 8
    assert cfg.data.voxel_counts == (10, 12)
    assert isinstance(cfg.lr, float)


def test_config_text_round_trip():
    cfg = tiny_config()
    assert parse_config(format_config(cfg)) == cfg
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("text", ["epochs = three", "nonsense = 1", "model.nope = 2", "just words", "cosine_decay = maybe"])
def test_bad_config_lines(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_infeasible_merge_schedule_rejected_at_startup():
    cfg = tiny_config()
    cfg.model.merge, cfg.model.layers = 4, 2
    with pytest.raises(ConfigError):
        cfg.validate()


# -- params ---------------------------------------------------------------


def test_count_linear_layer():
    count = count_params(Linear(64, 64, np.random.default_rng(0)))
    assert count.total == 4160
    assert count.breakdown == {"weight": 4096, "bias": 64}


def test_zero_layer_modules_count_zero():
    cfg = ModelConfig(dim=8, heads=2, layers=0, merge=0, queries=2, qformer_layers=0, prior_layers=0,
                      retrieval_dim=4, target_dim=4, projector_hidden=4, pe_hidden=4)
    count = count_params(VoxelFormer(cfg, np.random.default_rng(0)))
    assert "encoder.attn" not in count.breakdown and "qformer.layers" not in count.breakdown
    assert count.breakdown["qformer.queries"] == 16


def test_default_model_under_two_million():
    count = count_params(VoxelFormer(ModelConfig(), np.random.default_rng(0)))
    assert count.total < 2_000_000
    assert sum(count.breakdown.values()) == count.total


# -- checkpoint -----------------------------------------------------------


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    cfg = tiny_config()
    result = train(cfg, out_dir=tmp_path)
    model, projection, cfg_back, state = load_trained(tmp_path / "checkpoint.bin")
    assert cfg_back == cfg and state.epoch == cfg.epochs - 1
    np.testing.assert_array_equal(projection, result.projection)
    rng = np.random.default_rng(0)
    r, c = rng.normal(size=(3, 10)), rng.uniform(-1, 1, size=(10, 3))
    result.model.eval()
    a, b = result.model(r, c), model(r, c)
    assert a.embedding.data.tobytes() == b.embedding.data.tobytes()
    assert a.prior.data.tobytes() == b.prior.data.tobytes()
    m = state.section("adam.m")
    assert set(m) == {name for name, _ in model.named_parameters()}
    assert int(state.tensors["adam.step"]) == result.optimizer.step_count


def test_checkpoint_record_layout():
    state = ckpt_io.Checkpoint(2, {"a": 1}, {"w": np.arange(6.0).reshape(2, 3)})
    raw = ckpt_io.encode_checkpoint(state)
    assert raw[:4] == b"VXCK"
    back = ckpt_io.decode_checkpoint(raw)
    assert back.epoch == 2 and back.config == {"a": 1}
    np.testing.assert_array_equal(back.tensors["w"], state.tensors["w"])
    with pytest.raises(ContractError):
        ckpt_io.decode_checkpoint(raw + b"\0")


def test_restore_rejects_mismatched_model(tmp_path):
    cfg = tiny_config()
    model = VoxelFormer(cfg.model, np.random.default_rng(0))
    state = ckpt_io.capture(model, 0, cfg.to_dict())
    cfg.model.dim = 4
    with pytest.raises(ContractError):
        ckpt_io.restore(state, VoxelFormer(cfg.model, np.random.default_rng(0)))


# -- training -------------------------------------------------------------


def test_metrics_stream_and_phases(tmp_path):
    cfg = tiny_config()
    cfg.epochs = 9
    train(cfg, out_dir=tmp_path, evaluate_at_end=False)
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert records[0]["record"] == "params"
    epochs = [r for r in records if r["record"] == "epoch"]
    assert [r["phase"] for r in epochs] == ["BiMixCo"] * 3 + ["SoftCLIP"] * 6
    assert all({"loss", "mse", "contrastive", "wall_time"} <= set(r) for r in epochs)


def test_same_seed_same_metrics():
    def run():
        metrics = train(tiny_config()).metrics
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in metrics]

    assert run() == run()


def test_different_seed_different_metrics():
    a, b = tiny_config(), tiny_config()
    b.seed = 1
    assert train(a).metrics[1]["loss"] != train(b).metrics[1]["loss"]


def test_nan_loss_aborts_with_diagnostic():
    cfg = tiny_config()
    data = generate(cfg.data, cfg.model.merge, cfg.model.layers)
    subject = data.subjects[0]
    subject.responses[subject.indices(data.train_ids)[0], 0] = np.nan
    with pytest.raises(NonFiniteError, match="non-finite"):
        train(cfg, dataset=data)


# -- cli ------------------------------------------------------------------


def write_config(tmp_path) -> str:
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_TEXT)
    return str(path)


def test_cli_generate_is_deterministic(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    for name in ("manifest.json", "subject_00.bin", "subject_01.bin", "targets.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_train_then_eval(tmp_path, capsys):
    cfg = write_config(tmp_path)
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["generate", "--config", cfg, "--seed", "3", "--out", str(data)]) == 0
    assert main(["train", "--config", cfg, "--seed", "3", "--data", str(data), "--out", str(run)]) == 0
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--pool-size", "10", "--trials", "4",
                 "--out", str(tmp_path / "report.csv")])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["pool_size"] == 10 and report["trials"] == 4
    assert 0.0 <= report["fwd_top1"] <= 1.0
    assert (tmp_path / "report.csv").read_text().startswith("subject_id,fwd_top1,bwd_top1,pool_size,trials")


def test_cli_params(tmp_path, capsys):
    assert main(["params", "--config", write_config(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "encoder.tokenizer" in out and out.strip().splitlines()[-1].startswith("total")


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", "--bogus-flag"]) == 1
    assert main(["frobnicate"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = -1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.bin")]) == 2
    assert "usage" in capsys.readouterr().err
