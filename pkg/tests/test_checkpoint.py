import numpy as np
import pytest

from builders import tiny_config
from segorder.checkpoint import Checkpoint, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from segorder.errors import CompatibilityError, CorruptionError
from segorder.model import SegmentOrderingModel
from segorder.optim import AdamWState


def sample_checkpoint(vocab):
    model = SegmentOrderingModel(tiny_config(vocab), seed=4)
    state = AdamWState(step=7, m={k: np.full(v.shape, 0.5) for k, v in model.params.items()},
                       v={k: np.full(v.shape, 0.25) for k, v in model.params.items()})
    return Checkpoint(model.config, model.state_dict(), step=7, seed=11, optimizer=state, meta={"objective": "mlm+so"})


def test_round_trip_preserves_everything(vocab, tmp_path):
    ckpt = sample_checkpoint(vocab)
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "a.ckpt", expected=ckpt.config)
    assert back.config == ckpt.config and (back.step, back.seed, back.meta) == (7, 11, {"objective": "mlm+so"})
    assert back.params.keys() == ckpt.params.keys()
    for k in ckpt.params:
        assert back.params[k].dtype == ckpt.params[k].dtype
        np.testing.assert_array_equal(back.params[k], ckpt.params[k])
        np.testing.assert_array_equal(back.optimizer.m[k], ckpt.optimizer.m[k])
        np.testing.assert_array_equal(back.optimizer.v[k], ckpt.optimizer.v[k])
    assert back.optimizer.step == 7
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_loaded_parameters_restore_model_outputs(vocab, ordinal_docs, tmp_path):
    from segorder.model import collate
    from segorder.packing import PackingConfig, pack_document

    model = SegmentOrderingModel(tiny_config(vocab), seed=2)
    save_checkpoint(tmp_path / "m.ckpt", Checkpoint(model.config, model.state_dict()))
    other = SegmentOrderingModel(tiny_config(vocab), seed=9)
    other.load_state_dict(load_checkpoint(tmp_path / "m.ckpt").params)
    batch = collate(pack_document(ordinal_docs[0], vocab, PackingConfig(context=64, max_segments=8)))
    np.testing.assert_array_equal(model.encode(batch).data, other.encode(batch).data)


def test_mismatched_config_names_every_differing_field(vocab):
    ckpt = sample_checkpoint(vocab)
    buf = checkpoint_bytes(ckpt)
    with pytest.raises(CompatibilityError) as err:
        parse_checkpoint(buf, expected=tiny_config(vocab, d=32, context=128))
    assert "d:" in str(err.value) and "context:" in str(err.value) and "layers" not in str(err.value)


def test_truncation_reports_byte_offset(vocab):
    buf = checkpoint_bytes(sample_checkpoint(vocab))
    with pytest.raises(CorruptionError) as err:
        parse_checkpoint(buf[: len(buf) // 2])
    assert err.value.offset is not None and 0 < err.value.offset <= len(buf) // 2


def test_flipped_byte_fails_the_checksum(vocab):
    buf = bytearray(checkpoint_bytes(sample_checkpoint(vocab)))
    buf[-20] ^= 0xFF
    with pytest.raises(CorruptionError, match="checksum"):
        parse_checkpoint(bytes(buf))


def test_foreign_file_is_rejected(tmp_path):
    with pytest.raises(CorruptionError, match="magic"):
        parse_checkpoint(b"PK\x03\x04" + bytes(20))
