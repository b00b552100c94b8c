import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphgcd import (
    EmbeddingSet,
    RunConfig,
    generate_synthetic,
    read_embedding_file,
    write_embedding_file,
)
from graphgcd.embed_io import (
    _draw_centers,
    format_config,
    parse_config,
    read_config,
    write_config,
)
from graphgcd.errors import (
    BadMagicError,
    FormatError,
    InputError,
    InvariantError,
    LabelRangeError,
    NonFiniteError,
    TruncatedError,
)

from oracles import brute_force_accuracy, plain_kmeans


def _random_set(seed: int, n: int, d: int, with_labels: bool) -> EmbeddingSet:
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(n, d)).astype(np.float32)
    labels = None
    if with_labels:
        labels = rng.integers(-1, 5, size=n).astype(np.int32)
    return EmbeddingSet(data=data, labels=labels)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 20),
    d=st.integers(1, 8),
    with_labels=st.booleans(),
    seed=st.integers(0, 2**32 - 1),
)
def test_gvle_roundtrip_identity(tmp_path_factory, n, d, with_labels, seed):
    emb = _random_set(seed, n, d, with_labels)
    path = tmp_path_factory.mktemp("gvle") / "e.gvle"
    write_embedding_file(emb, path)
    back = read_embedding_file(path)
    assert back.data.dtype == np.float32
    np.testing.assert_array_equal(back.data, emb.data)
    if with_labels:
        np.testing.assert_array_equal(back.labels, emb.labels)
    else:
        assert back.labels is None


def test_gvle_header_math(tmp_path):
    # 4 magic + 4 n + 4 d + 1 flag + 4 payload = 17 bytes for a 1x1 set
    path = tmp_path / "one.gvle"
    write_embedding_file(EmbeddingSet(np.zeros((1, 1), dtype=np.float32)), path)
    assert path.stat().st_size == 17


def test_gvle_write_deterministic(tmp_path):
    emb = _random_set(3, 7, 4, True)
    a, b = tmp_path / "a.gvle", tmp_path / "b.gvle"
    write_embedding_file(emb, a)
    write_embedding_file(emb, b)
    assert a.read_bytes() == b.read_bytes()


def test_gvle_write_rejects_nonfinite(tmp_path):
    emb = _random_set(0, 2, 2, False)
    emb.data[0, 0] = np.nan  # mutate after construction
    with pytest.raises(NonFiniteError):
        write_embedding_file(emb, tmp_path / "bad.gvle")


def test_gvle_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.gvle"):
        read_embedding_file(tmp_path / "nope.gvle")


def test_gvle_bad_magic(tmp_path):
    path = tmp_path / "bad.gvle"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(BadMagicError):
        read_embedding_file(path)


def test_gvle_truncated_payload_names_offset(tmp_path):
    # header says n=2, d=3 (needs 24 payload bytes) but only 20 are present
    path = tmp_path / "short.gvle"
    path.write_bytes(b"GVLE" + struct.pack("<IIB", 2, 3, 0) + b"\x00" * 20)
    with pytest.raises(TruncatedError) as exc:
        read_embedding_file(path)
    assert "13" in str(exc.value)   # payload starts after the 13-byte header
    assert "24" in str(exc.value)


def test_gvle_label_below_minus_one(tmp_path):
    path = tmp_path / "lab.gvle"
    data = np.zeros((2, 1), dtype="<f4").tobytes()
    labels = np.asarray([0, -2], dtype="<i4").tobytes()
    path.write_bytes(b"GVLE" + struct.pack("<IIB", 2, 1, 1) + data + labels)
    with pytest.raises(LabelRangeError) as exc:
        read_embedding_file(path)
    # offending label sits at 13 (header) + 8 (payload) + 4 (first label)
    assert "25" in str(exc.value)


def test_gvle_trailing_bytes(tmp_path):
    path = tmp_path / "trail.gvle"
    data = np.zeros((1, 1), dtype="<f4").tobytes()
    path.write_bytes(b"GVLE" + struct.pack("<IIB", 1, 1, 0) + data + b"xx")
    with pytest.raises(FormatError, match="trailing"):
        read_embedding_file(path)


def test_gvle_bad_flag_and_empty_header(tmp_path):
    path = tmp_path / "flag.gvle"
    path.write_bytes(b"GVLE" + struct.pack("<IIB", 1, 1, 7) + b"\x00" * 4)
    with pytest.raises(FormatError, match="has_labels"):
        read_embedding_file(path)
    path2 = tmp_path / "empty.gvle"
    path2.write_bytes(b"GVLE" + struct.pack("<IIB", 0, 4, 0))
    with pytest.raises(FormatError, match="empty"):
        read_embedding_file(path2)


def test_gvle_nonfinite_payload_names_offset(tmp_path):
    path = tmp_path / "nan.gvle"
    data = np.asarray([[1.0, np.inf]], dtype="<f4").tobytes()
    path.write_bytes(b"GVLE" + struct.pack("<IIB", 1, 2, 0) + data)
    with pytest.raises(NonFiniteError) as exc:
        read_embedding_file(path)
    assert "17" in str(exc.value)  # second float: 13 + 4


def test_embedding_set_validation():
    with pytest.raises(InvariantError):
        EmbeddingSet(np.zeros(3, dtype=np.float32))  # 1-D
    with pytest.raises(NonFiniteError):
        EmbeddingSet(np.asarray([[np.nan]], dtype=np.float32))
    with pytest.raises(InvariantError):
        EmbeddingSet(np.zeros((2, 2), dtype=np.float32), labels=np.asarray([0]))
    with pytest.raises(InvariantError):
        EmbeddingSet(np.zeros((2, 2), dtype=np.float32), labels=np.asarray([0, -3]))


# -- config ------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(
    knn_k=st.integers(1, 9),
    layers=st.integers(0, 3),
    alpha=st.floats(0.0, 1.0, allow_nan=False),
    lr=st.floats(1e-6, 1.0, allow_nan=False),
    epochs=st.integers(0, 500),
    seed=st.integers(0, 2**64 - 1),
    temp=st.floats(0.01, 10.0, allow_nan=False),
)
def test_config_text_roundtrip(knn_k, layers, alpha, lr, epochs, seed, temp):
    cfg = RunConfig(
        knn_k=knn_k, gcn_layers=layers, margin_alpha=alpha, learn_rate=lr,
        epochs=epochs, seed=seed, temperature=temp,
    )
    assert parse_config(format_config(cfg)) == cfg


def test_config_file_roundtrip(tmp_path):
    cfg = RunConfig(seed=123456789012345678, learn_rate=3e-4)
    path = tmp_path / "config.txt"
    write_config(cfg, path)
    assert read_config(path) == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(InputError, match="unknown key"):
        parse_config("knn_k=3\nwat=1\n")


def test_config_rejects_bad_value_and_shape():
    with pytest.raises(InputError, match="bad value"):
        parse_config("epochs=soon\n")
    with pytest.raises(InputError, match="key=value"):
        parse_config("epochs\n")


def test_config_skips_comments_and_blanks():
    cfg = parse_config("# a comment\n\nknn_k=4\n")
    assert cfg.knn_k == 4


@pytest.mark.parametrize(
    "field,value",
    [
        ("knn_k", 0),
        ("gcn_layers", 4),
        ("margin_alpha", 1.5),
        ("temperature", 0.0),
        ("learn_rate", 0.0),
        ("batch_size", 0),
        ("epochs", -1),
        ("seed", -1),
        ("seed", 2**64),
        ("hidden_dim", -2),
        ("context_vectors_m", -1),
    ],
)
def test_config_validate_bounds(field, value):
    cfg = RunConfig(**{field: value})
    with pytest.raises(InputError):
        cfg.validate()


def test_config_validate_knn_vs_classes():
    RunConfig(knn_k=3).validate(known_class_count=5)
    with pytest.raises(InputError, match="knn_k"):
        RunConfig(knn_k=5).validate(known_class_count=5)


def test_config_resolved_hidden_dim():
    assert RunConfig().resolved(32).hidden_dim == 32
    assert RunConfig(hidden_dim=7).resolved(32).hidden_dim == 7


# -- synthetic generator -----------------------------------------------------

def test_synthetic_counting_contract():
    labeled, unlabeled, class_emb = generate_synthetic(2, 1, 2, 4, 6.0, seed=0)
    assert labeled.n == 2 and set(labeled.labels.tolist()) == {0}
    assert unlabeled.n == 4
    assert class_emb.n == 1 and class_emb.dim == 4


def test_synthetic_deterministic():
    a = generate_synthetic(4, 2, 3, 8, 6.0, seed=9)
    b = generate_synthetic(4, 2, 3, 8, 6.0, seed=9)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)
        np.testing.assert_array_equal(x.labels, y.labels)


def test_synthetic_unit_norm_rows():
    labeled, unlabeled, class_emb = generate_synthetic(5, 3, 4, 16, 2.0, seed=1)
    for emb in (labeled, unlabeled, class_emb):
        norms = np.linalg.norm(emb.data.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_synthetic_center_separation():
    rng = np.random.default_rng(0)
    centers = _draw_centers(rng, 6, 16)
    sims = centers @ centers.T
    off = sims[~np.eye(6, dtype=bool)]
    assert off.max() <= 0.5 + 1e-12


def test_synthetic_infeasible_separation():
    # 40 directions pairwise >= 60 degrees apart do not fit on a circle
    with pytest.raises(InputError, match="attempts"):
        generate_synthetic(40, 2, 2, 2, 6.0, seed=0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(class_count=3, known_count=0, per_class=2, d=4, separation=6.0),
        dict(class_count=3, known_count=4, per_class=2, d=4, separation=6.0),
        dict(class_count=3, known_count=1, per_class=1, d=4, separation=6.0),
        dict(class_count=3, known_count=1, per_class=2, d=0, separation=6.0),
        dict(class_count=3, known_count=1, per_class=2, d=4, separation=0.0),
    ],
)
def test_synthetic_argument_validation(kwargs):
    with pytest.raises(InputError):
        generate_synthetic(seed=0, **kwargs)


def test_synthetic_well_separated_kmeans_sanity():
    """High separation means plain k-means recovers the classes from raw data."""
    labeled, unlabeled, class_emb = generate_synthetic(5, 2, 30, 16, 10.0, seed=0)
    x = unlabeled.data.astype(np.float64)
    truth = unlabeled.labels
    init = np.vstack([x[truth == c].mean(axis=0) for c in range(5)])
    assignment, _, _ = plain_kmeans(x, init)
    acc = brute_force_accuracy(assignment, truth, 5, 5)
    assert acc >= 0.95
