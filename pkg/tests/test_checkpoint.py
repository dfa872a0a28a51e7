import json

import numpy as np
import pytest

from lrnnet.blocks import build_lrnnet, model_spec
from lrnnet.checkpoint import load_into, load_network, read_checkpoint, save_checkpoint
from lrnnet.errors import CheckpointError
from lrnnet.tensor import Tensor


def small(variant="B", seed=0):
    return build_lrnnet(model_spec(variant, num_classes=4, stage_channels=(8, 16, 32),
                                   blocks_per_stage=(1, 1, 2), stage3_dilations=(1, 2)), seed=seed)


def header(path):
    raw = path.read_bytes()
    end = raw.index(b"\n")
    return json.loads(raw[:end]), end + 1, raw


class TestFormat:
    def test_layout(self, tmp_path):
        net = small()
        save_checkpoint(tmp_path / "n.ckpt", net)
        manifest, start, raw = header(tmp_path / "n.ckpt")
        assert start % 16 == 0
        names = [e["name"] for e in manifest["tensors"]]
        assert names == [n for n, _ in net.state()]
        for e, (_, arr) in zip(manifest["tensors"], net.state()):
            assert e["dtype"] == "f32" and e["offset"] % 16 == 0
            assert e["length"] == 4 * arr.size and e["shape"] == list(arr.shape)
            blob = raw[start + e["offset"]:start + e["offset"] + e["length"]]
            np.testing.assert_array_equal(np.frombuffer(blob, "<f4").reshape(arr.shape), arr)
        assert manifest["spec_hash"] == net.spec.hash()

    def test_roundtrip_outputs(self, tmp_path, rng):
        net = small(seed=4)
        x = Tensor(rng.random((1, 3, 16, 32), dtype=np.float32))
        net.forward(x, training=True)          # moves the running statistics
        save_checkpoint(tmp_path / "n.ckpt", net, meta={"note": "x"})
        again, manifest, _ = load_network(tmp_path / "n.ckpt")
        assert manifest["meta"] == {"note": "x"}
        np.testing.assert_array_equal(again.forward(x, training=False).data,
                                      net.forward(x, training=False).data)

    def test_bytes_deterministic(self, tmp_path):
        save_checkpoint(tmp_path / "a", small(seed=2))
        save_checkpoint(tmp_path / "b", small(seed=2))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


class TestErrors:
    def test_spec_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "b.ckpt", small("B"))
        manifest, tensors = read_checkpoint(tmp_path / "b.ckpt")
        with pytest.raises(CheckpointError, match="hash"):
            load_into(small("C"), manifest, tensors)

    def test_missing_tensor(self, tmp_path):
        net = small()
        save_checkpoint(tmp_path / "n.ckpt", net)
        manifest, tensors = read_checkpoint(tmp_path / "n.ckpt")
        del tensors["stage1.down.conv.weight"]
        with pytest.raises(CheckpointError, match="lacks"):
            load_into(net, manifest, tensors)

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "n.ckpt", small())
        raw = (tmp_path / "n.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-64])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(tmp_path / "t.ckpt")

    @pytest.mark.parametrize("content", [b"not json\n", b"no newline", b'{"format": "other"}\n'])
    def test_garbage(self, tmp_path, content):
        (tmp_path / "g").write_bytes(content)
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "g")

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            read_checkpoint(tmp_path / "absent")
