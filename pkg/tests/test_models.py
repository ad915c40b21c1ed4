import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from arwb import evalkit as E
from arwb import models as M
from arwb import scenegen as S
from arwb import tensor as T
from arwb.errors import ContractError, DimensionError, FormatError, KindMismatchError
from arwb.tensor import Tensor


def test_zero_detector_gives_half_objectness():
    det = M.init_model(M.DETECTOR, zero=True)
    pred = M.detector_forward(det, np.zeros((64, 64, 3)))
    np.testing.assert_array_equal(pred.objectness, np.full((4, 4), 0.5))


def test_zero_regressor_outputs_final_bias():
    reg = M.init_model(M.REGRESSOR, zero=True)
    reg.params["fc2.b"].data[:] = 0.25
    x = np.random.default_rng(0).random((64, 64, 3))
    assert M.regressor_forward(reg, x).item() == pytest.approx(0.25 * M.DISTANCE_SCALE)


def test_wrong_input_shape_and_kind():
    det = M.init_model(M.DETECTOR)
    reg = M.init_model(M.REGRESSOR)
    with pytest.raises(DimensionError):
        M.detector_forward(det, np.zeros((32, 32, 3)))
    with pytest.raises(DimensionError):
        M.regressor_forward(reg, np.zeros((64, 64, 1)))
    with pytest.raises(ContractError):
        M.detector_forward(reg, np.zeros((64, 64, 3)))


def test_forward_is_pure():
    det = M.init_model(M.DETECTOR, seed=3)
    x = np.random.default_rng(1).random((2, 64, 64, 3))
    a = M.detector_logits(det, x).data
    b = M.detector_logits(det, x).data
    assert a.tobytes() == b.tobytes()


def _small_sign_batch(n=2, seed=0):
    return S.generate_sign_dataset(n, seed).images()[:n]


def test_detector_loss_gradients_fd(detector):
    rng = np.random.default_rng(0)
    data = S.generate_sign_dataset(10, seed=5)
    for k in range(10):
        x = np.clip(data.images()[k] + rng.normal(0, 0.02, (64, 64, 3)), 0, 1)
        box = [data.boxes()[k]]
        err = T.finite_diff_check(lambda t: T.tsum(M.detector_loss(detector, T.reshape(t, (1, 64, 64, 3)), box)), x,
                                  h=1e-3, max_coords=24, seed=k)
        assert err < 1e-3


def test_summed_objectness_gradient_fd(detector):
    x = _small_sign_batch(1, seed=2)[0]

    def f(t):
        raw = M.detector_logits(detector, T.reshape(t, (1, 64, 64, 3)))
        return T.tsum(T.sigmoid(raw[..., 0]))

    assert T.finite_diff_check(f, x, max_coords=24) < 1e-3


def test_regressor_gradient_fd(regressor):
    rng = np.random.default_rng(1)
    for k in range(10):
        scene = S.generate_road_dataset(1, seed=k).entries[0]
        x = scene.image.astype(np.float64)

        def f(t):
            return T.mul(M.regressor_forward(regressor, t), 1.0 / M.DISTANCE_SCALE)

        assert T.finite_diff_check(f, x, max_coords=24, seed=int(rng.integers(100))) < 1e-3


def test_decode_all_below_threshold_is_empty():
    raw = np.full((4, 4, 5), -10.0)
    assert M.decode_detections(raw, conf_threshold=0.25) == []


def test_nms_identical_boxes_keeps_best():
    dets = [M.Detection((20, 20, 10, 10), 0.8), M.Detection((20, 20, 10, 10), 0.9)]
    kept = M.nms(dets, 0.5)
    assert [d.score for d in kept] == [0.9]


def brute_force_nms(dets, thr):
    """Keep d iff no higher-scored kept box overlaps it above thr (exhaustive fixpoint)."""
    ordered = sorted(dets, key=lambda d: -d.score)
    keep = [False] * len(ordered)
    for i, d in enumerate(ordered):
        keep[i] = not any(keep[j] and M.box_iou(ordered[j].box, d.box) > thr for j in range(i))
    return [d for d, k in zip(ordered, keep) if k]


def test_nms_three_box_case_matches_oracle():
    # B overlaps A heavily and is suppressed; C overlaps B but not A, so it survives
    a = M.Detection((20, 20, 16, 16), 0.9)
    b = M.Detection((26, 20, 16, 16), 0.8)
    c = M.Detection((34, 20, 16, 16), 0.7)
    for perm in itertools.permutations([a, b, c]):
        assert M.nms(list(perm), 0.4) == brute_force_nms(list(perm), 0.4)
    assert [d.score for d in M.nms([a, b, c], 0.4)] == [0.9, 0.7]


boxes_st = st.tuples(st.floats(8, 56), st.floats(8, 56), st.floats(2, 30), st.floats(2, 30))


@given(st.lists(st.tuples(boxes_st, st.floats(0, 1)), max_size=8), st.floats(0.1, 0.9), st.randoms())
def test_nms_properties(items, thr, rnd):
    dets = [M.Detection(b, s) for b, s in items]
    kept = M.nms(dets, thr)
    assert [d.score for d in kept] == sorted((d.score for d in kept), reverse=True)
    for x, y in itertools.combinations(kept, 2):
        assert M.box_iou(x.box, y.box) <= thr
    shuffled = list(dets)
    rnd.shuffle(shuffled)
    if len({d.score for d in dets}) == len(dets):
        assert M.nms(shuffled, thr) == kept
    assert kept == brute_force_nms(dets, thr)


def test_decoded_boxes_inside_image():
    raw = np.random.default_rng(0).normal(0, 5, (4, 4, 5))
    b = M.decode_boxes(raw)
    assert (b[..., 0] - b[..., 2] / 2 >= -1e-9).all() and (b[..., 0] + b[..., 2] / 2 <= 64 + 1e-9).all()
    assert (b[..., 1] - b[..., 3] / 2 >= -1e-9).all() and (b[..., 1] + b[..., 3] / 2 <= 64 + 1e-9).all()
    assert (b[..., 2:] > 0).all()


def test_train_zero_epochs_is_noop():
    model = M.init_model(M.DETECTOR, seed=1)
    before = M.to_bytes(model)
    report = M.train(model, S.generate_sign_dataset(8, seed=0), epochs=0, lr=1e-3, seed=0)
    assert report.losses == []
    assert M.to_bytes(model) == before


def test_train_empty_dataset_raises():
    empty = S.DatasetManifest("sign", [])
    with pytest.raises(ContractError):
        M.train(M.init_model(M.DETECTOR), empty, 1, 1e-3, 0)


def test_training_is_deterministic_and_decreases_loss():
    data = S.generate_sign_dataset(40, seed=2)
    a, b = M.init_model(M.DETECTOR, 4), M.init_model(M.DETECTOR, 4)
    ra = M.train(a, data, 3, 2e-3, seed=9, batch_size=8)
    M.train(b, data, 3, 2e-3, seed=9, batch_size=8)
    assert a.checksum() == b.checksum()
    assert ra.losses[-1] < ra.losses[0]


def test_trained_detector_map(detector, sign_test):
    m = E.detection_metrics(M.detect(detector, sign_test.images()), sign_test.boxes())
    assert m.map50 >= 0.90


def test_trained_regressor_accuracy(regressor, road_test):
    pred = M.predict_distance(regressor, road_test.images())
    assert np.mean(np.abs(pred - road_test.distances())) < 2.0


def test_regressor_at_twenty_metres(regressor):
    seq = S.generate_road_sequence(5, 20.0, 20.0, seed=4)
    pred = M.predict_distance(regressor, np.stack([f.image for f in seq]))
    assert np.all(np.abs(pred - 20.0) <= 3.0)


def test_checkpoint_round_trip(tmp_path, detector):
    path = tmp_path / "det.ckpt"
    M.save(detector, path)
    back = M.load(path)
    assert back.kind == M.DETECTOR
    for k, v in detector.params.items():
        assert back.params[k].data.tobytes() == v.data.tobytes()
    assert path.read_bytes()[:5] == b"ARWB1"


def test_checkpoint_errors(tmp_path):
    blob = M.to_bytes(M.init_model(M.DETECTOR))
    with pytest.raises(FormatError):
        M.from_bytes(b"X" + blob[1:])
    with pytest.raises(FormatError):
        M.from_bytes(blob[:-7])
    with pytest.raises(KindMismatchError):
        M.from_bytes(blob, kind=M.REGRESSOR)


def test_every_arch_entry_has_matching_params():
    for kind in (M.DETECTOR, M.REGRESSOR, M.DENOISER):
        model = M.init_model(kind)
        for _, name, shape, _ in model.arch:
            assert model.params[f"{name}.w"].shape == shape
    bad = M.init_model(M.DETECTOR).params
    bad["head.w"] = Tensor(np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        M.ModelBundle(M.DETECTOR, bad)
