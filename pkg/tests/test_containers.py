import glob
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ogctl.containers import (
    CheckpointPayload,
    read_checkpoint,
    read_embeddings,
    read_embeddings_csv,
    read_templates,
    write_checkpoint,
    write_embeddings,
    write_templates,
)
from ogctl.errors import ContainerError
from ogctl.numerics import make_rng
from ogctl.records import EmbeddingSet, TemplateSet


def random_embedding_set(seed, k, n, dims, aux_dim=0):
    rng = make_rng(seed)
    return EmbeddingSet(
        patch_dims=tuple(dims),
        subjects=rng.integers(0, 50, size=k).astype(np.int64),
        medias=rng.integers(0, 50, size=k).astype(np.int64),
        occlusion=(rng.random((k, n)) > 0.4).astype(np.uint8),
        patches=[rng.standard_normal((k, d)).astype(np.float32) for d in dims],
        aux=rng.standard_normal((k, aux_dim)).astype(np.float32) if aux_dim else None,
    )


def assert_sets_equal(a: EmbeddingSet, b: EmbeddingSet):
    assert a.patch_dims == b.patch_dims
    assert np.array_equal(a.subjects, b.subjects)
    assert np.array_equal(a.medias, b.medias)
    assert np.array_equal(a.occlusion, b.occlusion)
    for pa, pb in zip(a.patches, b.patches):
        assert np.array_equal(pa, pb)
    if a.aux is None:
        assert b.aux is None
    else:
        assert np.array_equal(a.aux, b.aux)


class TestEmbeddingContainer:
    @given(
        seed=st.integers(0, 2**31 - 1),
        k=st.integers(1, 20),
        n=st.integers(1, 5),
        aux=st.sampled_from([0, 3]),
    )
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_is_identity(self, tmp_path_factory, seed, k, n, aux):
        path = str(tmp_path_factory.mktemp("emb") / "x.ogeb")
        rng = make_rng(seed)
        dims = [int(d) for d in rng.integers(1, 9, size=n)]
        ds = random_embedding_set(seed, k, n, dims, aux_dim=aux)
        write_embeddings(path, ds)
        assert_sets_equal(ds, read_embeddings(path))

    def test_header_and_record_byte_layout(self, tmp_path):
        path = str(tmp_path / "x.ogeb")
        ds = random_embedding_set(0, 7, 3, (4, 5, 6))
        write_embeddings(path, ds)
        header = 4 + 4 + 4 + 3 * 4 + 4 + 8
        record = 4 + 4 + 3 + 4 * (4 + 5 + 6)
        assert os.path.getsize(path) == header + 7 * record

    def test_truncation_reports_offset(self, tmp_path):
        path = str(tmp_path / "x.ogeb")
        ds = random_embedding_set(1, 4, 2, (3, 3))
        write_embeddings(path, ds)
        data = open(path, "rb").read()
        open(path, "wb").write(data[:-5])
        with pytest.raises(ContainerError, match="truncated at byte"):
            read_embeddings(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = str(tmp_path / "x.ogeb")
        ds = random_embedding_set(2, 4, 2, (3, 3))
        write_embeddings(path, ds)
        with open(path, "ab") as f:
            f.write(b"\x00")
        with pytest.raises(ContainerError, match="trailing"):
            read_embeddings(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "x.ogeb")
        ds = random_embedding_set(3, 2, 2, (3, 3))
        write_embeddings(path, ds)
        data = bytearray(open(path, "rb").read())
        data[:4] = b"NOPE"
        open(path, "wb").write(bytes(data))
        with pytest.raises(ContainerError, match="bad magic"):
            read_embeddings(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = str(tmp_path / "x.ogeb")
        ds = random_embedding_set(4, 2, 2, (3, 3))
        write_embeddings(path, ds)
        data = bytearray(open(path, "rb").read())
        data[4:8] = (99).to_bytes(4, "little")
        open(path, "wb").write(bytes(data))
        with pytest.raises(ContainerError, match="version"):
            read_embeddings(path)

    def test_nan_payload_rejected(self, tmp_path):
        path = str(tmp_path / "x.ogeb")
        ds = random_embedding_set(5, 2, 2, (3, 3))
        write_embeddings(path, ds)
        data = bytearray(open(path, "rb").read())
        data[-4:] = np.float32(np.nan).tobytes()
        open(path, "wb").write(bytes(data))
        with pytest.raises(ContainerError, match="non-finite"):
            read_embeddings(path)

    def test_no_temp_files_left_behind(self, tmp_path):
        path = str(tmp_path / "x.ogeb")
        write_embeddings(path, random_embedding_set(6, 2, 2, (3, 3)))
        assert glob.glob(str(tmp_path / ".tmp-*")) == []

    def test_thousand_record_roundtrip(self, tmp_path):
        path = str(tmp_path / "big.ogeb")
        ds = random_embedding_set(7, 1000, 4, (6, 5, 4, 3), aux_dim=2)
        write_embeddings(path, ds)
        assert_sets_equal(ds, read_embeddings(path))


class TestTemplateContainer:
    @given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 30), d=st.integers(1, 16))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_is_identity(self, tmp_path_factory, seed, k, d):
        path = str(tmp_path_factory.mktemp("tpl") / "x.ogtp")
        rng = make_rng(seed)
        tset = TemplateSet(
            subjects=rng.integers(0, 9, size=k).astype(np.int64),
            medias=rng.integers(0, 9, size=k).astype(np.int64),
            values=rng.standard_normal((k, d)).astype(np.float32),
        )
        write_templates(path, tset)
        back = read_templates(path)
        assert np.array_equal(tset.subjects, back.subjects)
        assert np.array_equal(tset.medias, back.medias)
        assert np.array_equal(tset.values, back.values)

    def test_128_dim_file_size_is_exact(self, tmp_path):
        path = str(tmp_path / "x.ogtp")
        rng = make_rng(0)
        tset = TemplateSet(
            subjects=np.zeros(100, dtype=np.int64),
            medias=np.zeros(100, dtype=np.int64),
            values=rng.standard_normal((100, 128)).astype(np.float32),
        )
        write_templates(path, tset)
        assert os.path.getsize(path) == 16 + 100 * 520

    def test_truncation_and_magic_checks(self, tmp_path):
        path = str(tmp_path / "x.ogtp")
        tset = TemplateSet(
            subjects=np.zeros(3, dtype=np.int64),
            medias=np.zeros(3, dtype=np.int64),
            values=np.ones((3, 4), dtype=np.float32),
        )
        write_templates(path, tset)
        data = open(path, "rb").read()
        open(path, "wb").write(data[:10])
        with pytest.raises(ContainerError, match="truncated at byte"):
            read_templates(path)
        open(path, "wb").write(b"XXXX" + data[4:])
        with pytest.raises(ContainerError, match="bad magic"):
            read_templates(path)


class TestCheckpointContainer:
    def test_roundtrip_bit_identical(self, tmp_path):
        path = str(tmp_path / "x.ogck")
        rng = make_rng(0)
        payload = CheckpointPayload(
            meta={"a": 1, "nested": {"b": [1, 2, 3]}, "s": "text"},
            arrays={
                "f32": rng.standard_normal((3, 4)).astype(np.float32),
                "f64": rng.standard_normal(5),
                "u8": np.array([0, 1, 1], dtype=np.uint8),
                "i64": np.arange(4, dtype=np.int64),
                "scalar": np.array(3.5),
            },
        )
        write_checkpoint(path, payload)
        back = read_checkpoint(path)
        assert back.meta == payload.meta
        assert set(back.arrays) == set(payload.arrays)
        for name in payload.arrays:
            assert back.arrays[name].dtype == payload.arrays[name].dtype
            assert np.array_equal(back.arrays[name], payload.arrays[name])

    def test_corrupt_magic_means_no_partial_load(self, tmp_path):
        path = str(tmp_path / "x.ogck")
        write_checkpoint(path, CheckpointPayload(meta={}, arrays={"w": np.ones(3)}))
        data = bytearray(open(path, "rb").read())
        data[0] = 0
        open(path, "wb").write(bytes(data))
        with pytest.raises(ContainerError, match="bad magic"):
            read_checkpoint(path)


class TestCsvImport:
    def _write(self, tmp_path, rows, header="subject,media,m_1,m_2,f1,f2,f3,f4"):
        path = str(tmp_path / "in.csv")
        with open(path, "w") as f:
            f.write(header + "\n")
            for row in rows:
                f.write(",".join(str(v) for v in row) + "\n")
        return path

    def test_binary_flags_and_even_split(self, tmp_path):
        path = self._write(tmp_path, [[7, 0, 1, 0, 0.5, 1.5, 2.5, 3.5]])
        ds = read_embeddings_csv(path)
        assert ds.patch_dims == (2, 2)
        assert ds.subjects[0] == 7
        assert list(ds.occlusion[0]) == [1, 0]
        np.testing.assert_allclose(ds.patches[0][0], [0.5, 1.5])
        np.testing.assert_allclose(ds.patches[1][0], [2.5, 3.5])

    def test_fractional_visibility_binarized_at_threshold(self, tmp_path):
        path = self._write(
            tmp_path,
            [[0, 0, 0.69, 0.70, 1, 2, 3, 4], [1, 0, 1.0, 0.0, 5, 6, 7, 8]],
        )
        ds = read_embeddings_csv(path, eps=0.7)
        assert list(ds.occlusion[0]) == [0, 1]      # 0.69 < 0.7 <= 0.70
        assert list(ds.occlusion[1]) == [1, 0]

    def test_uneven_columns_rejected_without_dims(self, tmp_path):
        path = self._write(
            tmp_path, [[0, 0, 1, 1, 1, 2, 3]], header="subject,media,m_1,m_2,f1,f2,f3"
        )
        with pytest.raises(ContainerError, match="divisible"):
            read_embeddings_csv(path)
        ds = read_embeddings_csv(path, patch_dims=(1, 2))
        assert ds.patch_dims == (1, 2)

    def test_missing_header_rejected(self, tmp_path):
        path = self._write(tmp_path, [], header="x,y,z")
        with pytest.raises(ContainerError, match="subject,media"):
            read_embeddings_csv(path)
