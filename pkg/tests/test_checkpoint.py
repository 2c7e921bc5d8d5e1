"""Checkpoint format tests: bit-exact round trips and corruption detection."""

import json
import struct

import numpy as np
import pytest

from roadsurface.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    load_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from roadsurface.data import ClassMap, batch_iterator, synth_generate
from roadsurface.errors import IntegrityError
from roadsurface.fbm import FbmConfig, build_classifiers, classifier_params
from roadsurface.model import ModelConfig, build_model, parse_stack_spec
from roadsurface.optim import AdamW
from roadsurface.tensor import cross_entropy


def tiny_config(num_classes=3):
    stack = parse_stack_spec("L[c1] M[c1 t1] M[c1] G[t1]",
                             channels=(4, 8, 8, 8))
    return ModelConfig(stack=stack, num_classes=num_classes,
                       input_resolution=32, head_dim=4, output_channel=16)


@pytest.fixture()
def trained_state():
    """A model with non-trivial optimizer moments after two real steps."""
    config = tiny_config()
    model = build_model(config, seed=7)
    classifiers = build_classifiers([s.channels for s in config.stack.stages],
                                    num_classes=3, seed=8)
    params = dict(model.params)
    params.update(classifier_params(classifiers))
    opt = AdamW(params, lr=1e-3)
    data = synth_generate(num_classes=3, per_class=2, resolution=32, seed=5)
    for images, labels in batch_iterator(data, batch=6, shuffle_seed=0):
        for _ in range(2):
            logits, _ = model.forward(images)
            loss = cross_entropy(logits, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
    fbm_cfg = FbmConfig(num_classes=3)
    class_map = ClassMap(("class0", "class1", "class2"))
    return model, classifiers, opt, fbm_cfg, class_map


def checkpoint_bytes(path):
    return path.read_bytes()


def repack(path, mutate_header):
    """Rewrite the file with a mutated header, keeping the checksum valid."""
    blob = path.read_bytes()
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(blob[start: start + header_len])
    payload = blob[start + header_len:]
    mutate_header(header)
    header_bytes = json.dumps(header).encode("utf-8")
    path.write_bytes(
        MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + payload
    )


class TestRoundTrip:
    def test_arrays_bit_identical(self, trained_state, tmp_path):
        model, classifiers, opt, fbm_cfg, class_map = trained_state
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, model, optimizer=opt, classifiers=classifiers,
                        fbm_config=fbm_cfg, class_map=class_map, step=12,
                        metrics={"top1": 0.5})
        bundle = load_checkpoint(path)
        assert list(bundle.model.params.keys()) == list(model.params.keys())
        for name, p in model.params.items():
            restored = bundle.model.params[name].data
            assert restored.tobytes() == p.data.tobytes(), name
        for name, p in classifier_params(classifiers).items():
            got = classifier_params(bundle.classifiers)[name].data
            assert got.tobytes() == p.data.tobytes(), name
        for name, arr in opt.state_arrays().items():
            assert bundle.optimizer_arrays[name].tobytes() == arr.tobytes()
        assert bundle.step == 12
        assert bundle.optimizer_t == opt.t
        assert bundle.metrics == {"top1": 0.5}
        assert bundle.model.config == model.config
        assert bundle.fbm_config == fbm_cfg
        assert bundle.class_map.names == class_map.names

    def test_restore_optimizer_moments(self, trained_state, tmp_path):
        model, classifiers, opt, fbm_cfg, _ = trained_state
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, model, optimizer=opt, classifiers=classifiers,
                        fbm_config=fbm_cfg)
        bundle = load_checkpoint(path)
        params = dict(bundle.model.params)
        params.update(classifier_params(bundle.classifiers))
        fresh = AdamW(params, lr=1e-3)
        restore_optimizer(fresh, bundle)
        assert fresh.t == opt.t
        for name in opt.params:
            assert fresh.m[name].tobytes() == opt.m[name].tobytes()
            assert fresh.v[name].tobytes() == opt.v[name].tobytes()

    def test_minimal_checkpoint_without_extras(self, tmp_path):
        model = build_model(tiny_config(), seed=1)
        path = tmp_path / "bare.bin"
        save_checkpoint(path, model)
        bundle = load_checkpoint(path)
        assert bundle.classifiers is None
        assert bundle.fbm_config is None
        assert bundle.class_map is None
        assert bundle.optimizer_arrays == {}
        for name, p in model.params.items():
            assert bundle.model.params[name].data.tobytes() == p.data.tobytes()

    def test_save_is_deterministic(self, trained_state, tmp_path):
        model, classifiers, opt, fbm_cfg, class_map = trained_state
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        for path in (a, b):
            save_checkpoint(path, model, optimizer=opt,
                            classifiers=classifiers, fbm_config=fbm_cfg,
                            class_map=class_map, step=3)
        assert a.read_bytes() == b.read_bytes()


class TestCorruptionDetection:
    @pytest.fixture()
    def saved(self, tmp_path):
        model = build_model(tiny_config(), seed=2)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, model, step=1)
        return path

    def test_flipped_payload_byte(self, saved):
        blob = bytearray(saved.read_bytes())
        blob[-1] ^= 0xFF
        saved.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError, match="checksum"):
            load_checkpoint(saved)

    def test_flipped_mid_payload_byte(self, saved):
        blob = bytearray(saved.read_bytes())
        blob[len(blob) // 2] ^= 0x01
        saved.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            load_checkpoint(saved)

    def test_bad_magic(self, saved):
        blob = bytearray(saved.read_bytes())
        blob[0] ^= 0xFF
        saved.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError, match="not a recognizable"):
            load_checkpoint(saved)

    def test_truncated_payload(self, saved):
        blob = saved.read_bytes()
        saved.write_bytes(blob[:-16])
        with pytest.raises(IntegrityError, match="manifest describes"):
            load_checkpoint(saved)

    def test_truncated_header(self, saved):
        blob = saved.read_bytes()
        saved.write_bytes(blob[: len(MAGIC) + 4])
        with pytest.raises(IntegrityError):
            load_checkpoint(saved)

    def test_version_mismatch_rejected(self, saved):
        repack(saved, lambda h: h.update(format_version=FORMAT_VERSION + 1))
        with pytest.raises(IntegrityError, match="format version"):
            load_checkpoint(saved)

    def test_byte_order_mismatch_rejected(self, saved):
        repack(saved, lambda h: h.update(byte_order="big"))
        with pytest.raises(IntegrityError, match="byte order"):
            load_checkpoint(saved)

    def test_renamed_array_rejected(self, saved):
        def rename(header):
            header["arrays"][0]["name"] = "stem.bogus.w"

        repack(saved, rename)
        with pytest.raises(IntegrityError, match="registry"):
            load_checkpoint(saved)

    def test_header_not_json(self, saved):
        blob = bytearray(saved.read_bytes())
        blob[len(MAGIC) + 8] ^= 0xFF
        saved.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            load_checkpoint(saved)
