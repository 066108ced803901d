import json
import struct

import numpy as np
import pytest

from cunet import cli
from cunet.io import (
    CheckpointError,
    ConfigError,
    ExperimentConfig,
    ImageFormatError,
    checkpoint_from_params,
    decode_checkpoint,
    decode_netpbm,
    encode_checkpoint,
    encode_netpbm,
    load_image,
    params_from_checkpoint,
    save_image,
)
from cunet.model import MIF, MIR, ModelConfig, cunet_forward, init_params
from cunet.train import AdamState, TrainConfig, train


def tiny(task=MIR):
    return init_params(ModelConfig(task=task, K=2, s=3, J=2, m=1), seed=0)


# -- images ---------------------------------------------------------------------

def test_p5_header_example():
    img = decode_netpbm(b"P5 2 2 255\n" + bytes([0, 128, 255, 64]))
    np.testing.assert_array_equal(img[..., 0], [[0, 128 / 255], [1, 64 / 255]])


def test_p5_without_separator_before_payload():
    img = decode_netpbm(b"P5 2 2 255" + bytes([0, 128, 255, 64]))
    np.testing.assert_array_equal(img.ravel(), [0, 128 / 255, 1, 64 / 255])


def test_header_comments_and_p6():
    raw = b"P6\n# a comment\n1 2\n255\n" + bytes([255, 0, 0, 0, 0, 255])
    img = decode_netpbm(raw)
    assert img.shape == (2, 1, 3)
    np.testing.assert_array_equal(img[0, 0], [1, 0, 0])


def test_quantized_roundtrip_is_exact(tmp_path, rng):
    img = rng.integers(0, 256, size=(5, 7, 3)) / 255.0
    save_image(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(load_image(tmp_path / "a.ppm"), img)


def test_16bit_roundtrip_error_bound(tmp_path, rng):
    img = rng.uniform(size=(9, 4, 1))
    save_image(tmp_path / "a.pgm", img, maxval=65535)
    assert np.abs(load_image(tmp_path / "a.pgm") - img).max() <= 0.5 / 65535
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.endswith(np.rint(img.ravel() * 65535).astype(">u2").tobytes())


def test_save_clamps(tmp_path):
    save_image(tmp_path / "c.pgm", np.array([[[-0.2], [1.7]]]))
    np.testing.assert_array_equal(load_image(tmp_path / "c.pgm").ravel(), [0.0, 1.0])


@pytest.mark.parametrize(
    "raw, offset",
    [
        (b"P3 2 2 255\n", 0),
        (b"P5 2 x 255\n", 5),
        (b"P5 2 2 255\n\x00\x01", 13),
        (b"P5 2 2", 6),
        (b"P5 1 1 0\n\x00", 7),
    ],
)
def test_parse_errors_carry_offset(raw, offset):
    with pytest.raises(ImageFormatError) as e:
        decode_netpbm(raw)
    assert e.value.offset == offset


def test_bad_channel_count():
    from cunet.tensor import ContractError

    with pytest.raises(ContractError):
        encode_netpbm(np.zeros((2, 2, 2)))


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_byte_identical_roundtrip():
    p = tiny(MIF)
    data = encode_checkpoint(checkpoint_from_params(p, metadata={"epoch": 3, "seed": 0, "loss_history": [0.5, 0.25]}))
    again = encode_checkpoint(decode_checkpoint(data))
    assert data == again
    assert data[:4] == b"CUN1"
    assert struct.unpack("<I", data[4:8])[0] == 1


def test_checkpoint_restores_model():
    p = tiny(MIF)
    q, state = params_from_checkpoint(decode_checkpoint(encode_checkpoint(checkpoint_from_params(p))))
    assert state is None and q.config == p.config
    x = np.random.default_rng(0).uniform(size=(8, 8, 1))
    np.testing.assert_allclose(cunet_forward(x, x, q)[0], cunet_forward(x, x, p)[0], atol=1e-6)


def test_checkpoint_with_optimizer_state():
    g = np.random.default_rng(0)
    data = tuple(g.uniform(size=(2, 8, 8, 1)) for _ in range(3))
    state = AdamState()
    p, _ = train(TrainConfig(epochs=1, batch_size=2), data, tiny(), state=state)
    ck = decode_checkpoint(encode_checkpoint(checkpoint_from_params(p, state)))
    q, st = params_from_checkpoint(ck)
    assert st.t == state.t == 1
    for k in state.m:
        np.testing.assert_array_equal(st.m[k], state.m[k].astype(np.float32))


def test_tensor_names_enumerate_the_parameters():
    p = tiny(MIR)
    ck = decode_checkpoint(encode_checkpoint(checkpoint_from_params(p)))
    expected = {f"{b}.{j}.{t}" for b in ("ufem_u", "ufem_v", "cfpm") for j in range(2) for t in ("D", "E", "theta")}
    expected |= {"syn_du", "syn_hv", "syn_dc", "syn_hc", "irm_gc", "irm_gu"}
    assert set(ck.tensors) == expected == set(p.named_tensors())


def test_truncated_checkpoint_names_first_missing_tensor():
    p = tiny(MIR)
    data = encode_checkpoint(checkpoint_from_params(p))
    names = list(p.named_tensors())
    # cut inside the last tensor's payload
    with pytest.raises(CheckpointError, match=f"tensors.{names[-1]}"):
        decode_checkpoint(data[:-3])
    with pytest.raises(CheckpointError, match=r"tensors\.ufem_u\.0\.D"):
        hlen = struct.unpack("<I", data[8:12])[0]
        decode_checkpoint(data[: 12 + hlen + 5])


def test_checkpoint_bad_magic_and_version():
    data = encode_checkpoint(checkpoint_from_params(tiny()))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(data[:4] + struct.pack("<I", 2) + data[8:])


# -- config ------------------------------------------------------------------------

def test_config_canonical_fixed_point():
    cfg = ExperimentConfig().with_overrides(["model.K=8", "train.lr0=0.002", "dataset.kind=guided-denoise"])
    text = cfg.to_json()
    assert ExperimentConfig.from_json(text).to_json() == text
    assert list(json.loads(text)) == sorted(json.loads(text))
    assert cfg.model.K == 8 and cfg.train.lr0 == 0.002


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json('{"colour": 1}')
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json('{"model": {"filters": 3}}')
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(["train.momentum=0.9"])
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(["model.task=both"])


# -- command line ------------------------------------------------------------------

def test_cli_eval_identical(tmp_path, rng, capsys):
    img = rng.uniform(size=(16, 16, 1))
    save_image(tmp_path / "a.pgm", img)
    assert cli.main(["eval", "--pred", str(tmp_path / "a.pgm"), "--target", str(tmp_path / "a.pgm"), "--out", str(tmp_path / "ev")]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == {"rmse": 0, "psnr": 99, "ssim": 1.0}
    stored = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert stored["samples"][0]["psnr"] == 99


def test_cli_oracle_check(capsys):
    assert cli.main(["oracle-check"]) == 0
    out = capsys.readouterr().out
    residual = float(out.split("max equivalence residual:")[1].split()[0])
    assert residual <= 1e-10


def _ckpt(tmp_path, task):
    path = tmp_path / f"{task}.cun"
    path.write_bytes(encode_checkpoint(checkpoint_from_params(tiny(task))))
    img = np.random.default_rng(0).uniform(size=(8, 8, 1))
    save_image(tmp_path / "x.pgm", img)
    save_image(tmp_path / "y.pgm", img[::-1])
    return path


def test_cli_task_mismatch(tmp_path, capsys):
    ck = _ckpt(tmp_path, MIF)
    argv = ["infer", "--checkpoint", str(ck), "--input", str(tmp_path / "x.pgm"), "--guidance", str(tmp_path / "y.pgm")]
    code = cli.main(argv + ["--set", "model.task=mir", "--out", str(tmp_path)])
    assert code == cli.EXIT_CODES["TASK_MISMATCH"]
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: TASK_MISMATCH:")


def test_cli_infer_and_decompose(tmp_path):
    ck = _ckpt(tmp_path, MIF)
    args = ["--checkpoint", str(ck), "--input", str(tmp_path / "x.pgm"), "--guidance", str(tmp_path / "y.pgm")]
    assert cli.main(["infer", *args, "--output", str(tmp_path / "z.pgm")]) == 0
    assert cli.main(["decompose", *args, "--out", str(tmp_path / "dec")]) == 0
    parts = {k: np.load(tmp_path / "dec" / f"point{k}.npy") for k in (1, 2, 3, 4)}
    np.testing.assert_array_equal(parts[1] + parts[2] + parts[3], parts[4])
    q = {k: load_image(tmp_path / "dec" / f"point{k}.pgm") for k in (1, 2, 3, 4)}
    z = load_image(tmp_path / "z.pgm")
    np.testing.assert_allclose(q[4], z, atol=1 / 65535)


@pytest.mark.parametrize(
    "argv, code",
    [
        (["infer", "--checkpoint", "missing.cun", "--input", "a", "--guidance", "b"], "MISSING_FILE"),
        (["train", "--set", "nonsense=1"], "CONFIG_ERROR"),
        (["train", "--config", "missing.json"], "MISSING_FILE"),
    ],
)
def test_cli_error_codes(argv, code, capsys):
    assert cli.main(argv) == cli.EXIT_CODES[code]
    assert capsys.readouterr().err.startswith(f"error: {code}:")


def test_cli_bad_checkpoint(tmp_path, capsys):
    (tmp_path / "bad.cun").write_bytes(b"NOPE" + bytes(20))
    save_image(tmp_path / "x.pgm", np.zeros((4, 4, 1)))
    code = cli.main(["infer", "--checkpoint", str(tmp_path / "bad.cun"), "--input", str(tmp_path / "x.pgm"), "--guidance", str(tmp_path / "x.pgm")])
    assert code == cli.EXIT_CODES["CHECKPOINT_ERROR"]


def test_cli_synth_train_deterministic(tmp_path):
    common = ["--set", "model.K=2", "--set", "model.s=3", "--set", "model.J=1", "--set", "train.epochs=1", "--set", "train.batch_size=2"]
    common += ["--set", "dataset.count=4", "--set", "dataset.val_count=2", "--set", "dataset.size=16", "--precision", "f64"]
    assert cli.main(["synth-data", *common, "--out", str(tmp_path / "ds")]) == 0
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert len(manifest["samples"]) == 6 and manifest["samples"][-1]["split"] == "val"
    for run in ("r1", "r2"):
        assert cli.main(["train", *common, "--data", str(tmp_path / "ds"), "--seed", "3", "--out", str(tmp_path / run)]) == 0
    a = (tmp_path / "r1" / "checkpoint.cun").read_bytes()
    assert a == (tmp_path / "r2" / "checkpoint.cun").read_bytes()
    rows = (tmp_path / "r1" / "train_log.csv").read_text().splitlines()
    assert rows[0] == "epoch,lr,train_loss,val_psnr" and len(rows) == 2
