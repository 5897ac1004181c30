import filecmp

import numpy as np
import pytest

from dfil.datasets import (DataFormatError, Dataset, DomainSpec, GenerationError, TaskSequence, cap_dataset,
                           generate_stream, load_csv, load_presets, load_stream, preset, preset_stream, write_csv,
                           write_stream)


class TestGeneration:
    def test_preset_shape(self, four_domain):
        assert len(four_domain) == 4
        assert len(four_domain[0].train) == 800
        assert [len(t.train) for t in four_domain][1:] == [200, 200, 200]
        assert all(len(t.test) == 400 for t in four_domain)
        assert four_domain[0].train.dim == 8

    def test_classes_balanced_after_cap(self, four_domain):
        for t in four_domain.tasks[1:]:
            assert t.train.labels.sum() == 100

    def test_deterministic(self, four_domain):
        again = preset_stream("four-domain", 7)
        for a, b in zip(four_domain, again):
            assert a.train == b.train and a.test == b.test

    def test_seed_changes_samples(self, four_domain):
        other = preset_stream("four-domain", 8)
        assert not np.array_equal(other[0].train.inputs, four_domain[0].train.inputs)

    def test_real_marginal_shared_across_domains(self, four_domain):
        reals = [t.train.inputs[t.train.labels == 0] for t in four_domain]
        ref = reals[0]
        for r in reals[1:]:
            se = np.sqrt(ref.var(axis=0) / len(ref) + r.var(axis=0) / len(r))
            assert (np.abs(ref.mean(axis=0) - r.mean(axis=0)) < 3 * se + 1e-12).all()

    def test_fake_shift_differs_per_domain(self, four_domain):
        means = [t.train.inputs[t.train.labels == 1].mean(axis=0) - t.train.inputs[t.train.labels == 0].mean(axis=0)
                 for t in four_domain]
        dominant = [set(np.argsort(-np.abs(m))[:2].tolist()) for m in means]
        assert dominant == [{0, 1}, {2, 3}, {4, 5}, {6, 7}]

    def test_single_domain(self):
        specs, cap = preset("single")
        assert len(generate_stream(specs, 0, cap)) == 1

    def test_catalog(self):
        assert {"four-domain", "same-fake", "single"} <= set(load_presets())

    def test_default_preset_geometry(self):
        specs, cap = preset("four-domain")
        assert cap == 200
        for s in specs:
            assert np.linalg.norm(s.fake_shift) == pytest.approx(2.5)
            assert sorted(s.fake_scale.tolist()) == [1.0] * 6 + [1.3, 1.3]
            assert s.input_dim == 8 and len(s.real_weights) == 2

    def test_degenerate_specs(self):
        base = preset("single")[0][0].to_dict()
        bad_weights = dict(base, real=dict(base["real"], weights=[0.7, 0.7]))
        with pytest.raises(GenerationError):
            DomainSpec.from_dict(bad_weights)
        bad_scale = dict(base, fake=dict(base["fake"], scale=[0.0] * 8))
        with pytest.raises(GenerationError):
            DomainSpec.from_dict(bad_scale)
        with pytest.raises(GenerationError):
            DomainSpec.from_dict(dict(base, n_train=3))
        with pytest.raises(GenerationError):
            generate_stream([], 0)

    def test_cap_keeps_order(self):
        ds = Dataset(np.arange(12.0).reshape(6, 2), [0, 1, 1, 0, 1, 0])
        capped = cap_dataset(ds, 4)
        assert capped.labels.tolist() == [0, 1, 1, 0]


class TestCsv:
    def test_minimal(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x0,x1,label\n0.5,1.5,0\n-2,3,1\n")
        ds = load_csv(p)
        assert len(ds) == 2 and ds.labels.tolist() == [0, 1]

    def test_bad_label(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x0,label\n0.5,0\n1.0,2\n")
        with pytest.raises(DataFormatError, match=":3:"):
            load_csv(p)

    def test_malformed_row_line_number(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x0,x1,label\n0.5,1.5,0\n0.5,abc,1\n")
        with pytest.raises(DataFormatError, match=":3:"):
            load_csv(p)

    def test_missing_class(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x0,label\n0.5,0\n1.0,0\n")
        with pytest.raises(DataFormatError, match="class 1"):
            load_csv(p)

    def test_round_trip(self, tmp_path, four_domain):
        ds = four_domain[1].train
        write_csv(ds, tmp_path / "beta.csv")
        back = load_csv(tmp_path / "beta.csv", ds.domain, ds.split)
        assert back == ds

    def test_stream_round_trip_and_bytes(self, tmp_path, four_domain):
        write_stream(four_domain, tmp_path / "a")
        write_stream(preset_stream("four-domain", 7), tmp_path / "b")
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert len(cmp.common_files) == 9 and not cmp.diff_files
        back = load_stream(tmp_path / "a")
        assert back.names == four_domain.names
        assert all(x.train == y.train and x.test == y.test for x, y in zip(back, four_domain))


def test_sequence_requires_both_classes():
    ds = Dataset(np.zeros((2, 2)), [0, 0])
    from dfil.datasets import Task
    with pytest.raises(DataFormatError):
        TaskSequence([Task("a", ds, ds)])
