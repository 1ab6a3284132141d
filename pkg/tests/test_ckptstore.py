from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from manasim import engine as eng
from manasim import upperhalf as uhm
from manasim.ckptstore import (HEADER, ImageSet, MissingRank, RealIdLeak, UnsupportedVersion,
                               decode_image, encode_image, load_images, write_image_set)
from manasim.harness import checkpoint_run, native_run, restart_run
from manasim.upperhalf import CorruptImage, DrainedEnvelope, PendingCollective
from manasim.workloads import WorkloadSpec


def busy_state():
    lh = eng.engine_init(eng.engine_id("linear"), 4)
    uh = uhm.new_upper_half(1, lh)
    c = uhm.v_comm_create(uh, lh, uhm.WORLD, (0, 1))
    uhm.v_group_incl(uh, lh, c, (1,))
    uh.memory = {"x": b"\x01\x02", "h:c": c.to_bytes(8, "little")}
    uh.drained = [DrainedEnvelope(9, 0, c, 3, 0, b"zz")]
    uh.sent = {(0, "w", 2): 4}
    uh.received = {(0, uh.handle(c).gid, 3): 1}
    uhm.begin_wrapper(uh, lh, PendingCollective("bcast", c, 0, None, 8))
    return uh


def test_fresh_round_trip_and_header():
    uh = uhm.new_upper_half(0, eng.engine_init(eng.engine_id("linear"), 1))
    data = encode_image(uh)
    assert data.startswith(HEADER)
    assert decode_image(data) == uh
    assert encode_image(decode_image(data)) == data


def test_busy_round_trip_is_byte_stable():
    a, b = busy_state(), busy_state()
    assert encode_image(a) == encode_image(b)
    assert encode_image(decode_image(encode_image(a))) == encode_image(a)
    assert decode_image(encode_image(a)) == a


def test_every_truncation_is_rejected():
    data = encode_image(busy_state())
    for n in range(len(data)):
        with pytest.raises(CorruptImage):
            decode_image(data[:n])
    with pytest.raises(CorruptImage):
        decode_image(data + b"\0")


def test_bad_version():
    data = bytearray(encode_image(busy_state()))
    data[len(HEADER) - 1] = 99
    with pytest.raises(UnsupportedVersion):
        decode_image(bytes(data))


def test_engine_name_not_in_image():
    data = encode_image(busy_state())
    for name in eng.ENGINES:
        assert name.encode() not in data


def _plant(uh, where, real):
    if where == "memory":
        uh.memory["k"] = real
    elif where == "handle":
        h = uh.handles[0]
        uh.handles[0] = h._replace(vid=real)
    elif where == "replay":
        uh.replay_log.append(uh.replay_log[0]._replace(args=(real, (0, 1))))
    elif where == "drained":
        uh.drained.append(uh.drained[0]._replace(src=real))
    elif where == "counter":
        uh.sent[(real, "w", 0)] = 1
    elif where == "count":
        uh.sent[(0, "w", 0)] = real
    elif where == "pending":
        uh.pending = uh.pending._replace(vid=real)
    elif where == "wrappers":
        uh.wrappers["w"] = real
    elif where == "pc":
        uh.pc = real


@settings(max_examples=200, deadline=None)
@given(where=st.sampled_from(["memory", "handle", "replay", "drained", "counter", "count",
                              "pending", "wrappers", "pc"]),
       value=st.integers(0, 2**31 - 1))
def test_real_ids_are_never_serialized(where, value):
    uh = busy_state()
    _plant(uh, where, eng.RealCommId(value))
    with pytest.raises((RealIdLeak, TypeError)):
        encode_image(uh)


def test_live_bindings_are_not_encoded():
    uh = busy_state()
    assert all(isinstance(r, eng.RealCommId) for r in uh.bindings.values())
    encode_image(uh)


def test_missing_rank(tmp_path):
    spec = WorkloadSpec("iter-allreduce", 4, steps=2)
    sim = checkpoint_run(spec, 10)
    images = dict(sim.images[0])
    del images[3]
    with pytest.raises(MissingRank):
        load_images(images, 4)
    write_image_set(images, tmp_path, 4, spec.to_dict(), 10)
    with pytest.raises(MissingRank):
        ImageSet(tmp_path).load()


def test_image_set_directory_restart(tmp_path):
    spec = WorkloadSpec("ring-pingpong", 4, steps=2)
    want = native_run(spec).digest()
    sim = checkpoint_run(spec, 25)
    write_image_set(sim.images[0], tmp_path, 4, spec.to_dict(), 25)
    s = ImageSet(tmp_path)
    assert WorkloadSpec.from_dict(s.workload) == spec
    images = {r: (tmp_path / f"rank-{r}.img").read_bytes() for r in range(4)}
    for engine in ("linear", "binomial"):
        assert restart_run(images, spec, engine).digest() == want


def test_rank_mismatch_in_set():
    spec = WorkloadSpec("iter-allreduce", 2, steps=1)
    imgs = checkpoint_run(spec, 3).images[0]
    with pytest.raises(CorruptImage):
        load_images({0: imgs[1], 1: imgs[0]}, 2)
