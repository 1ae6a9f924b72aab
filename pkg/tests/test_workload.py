"""Workload generation: arrival processes, template mix, bursts, CSV."""

from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import small_catalog_doc
from hybridsim import rng as hrng
from hybridsim.datamodel import load_catalog
from hybridsim.errors import WorkloadError
from hybridsim.workload import (
    Burst,
    WorkloadSpec,
    generate_workload,
    load_workload_spec,
    merge_bursts,
    workload_from_csv,
    workload_to_csv,
)


def spec_doc(**overrides) -> dict:
    doc = {
        "horizon_s": 1000.0,
        "arrival": {"kind": "fixed_count", "n": 100},
        "seed": 7,
    }
    doc.update(overrides)
    return doc


class TestLoadWorkloadSpec:
    def test_fixed_count_spec(self):
        spec = load_workload_spec(spec_doc())
        assert spec.arrival_kind == "fixed_count"
        assert spec.count == 100
        assert spec.bursts == ()

    def test_poisson_spec(self):
        spec = load_workload_spec(
            spec_doc(arrival={"kind": "poisson", "rate_per_s": 0.5})
        )
        assert spec.arrival_kind == "poisson"
        assert spec.rate_per_s == 0.5

    def test_bad_kind_rejected(self):
        with pytest.raises(WorkloadError, match="arrival.kind"):
            load_workload_spec(spec_doc(arrival={"kind": "weibull"}))

    def test_nonpositive_horizon_rejected(self):
        with pytest.raises(WorkloadError, match="horizon_s"):
            load_workload_spec(spec_doc(horizon_s=0))

    def test_burst_outside_horizon_rejected(self):
        bursts = [{"start_s": 990.0, "duration_s": 20.0, "extra_queries": 5}]
        with pytest.raises(WorkloadError, match="within"):
            load_workload_spec(spec_doc(bursts=bursts))

    def test_burst_needs_positive_extras(self):
        bursts = [{"start_s": 10.0, "duration_s": 20.0, "extra_queries": 0}]
        with pytest.raises(WorkloadError, match="extra_queries"):
            load_workload_spec(spec_doc(bursts=bursts))


class TestGenerateWorkload:
    def setup_method(self):
        self.catalog = load_catalog(small_catalog_doc())

    def test_fixed_count_exact(self):
        spec = WorkloadSpec(108_000.0, "fixed_count", count=2194, seed=42)
        instances = generate_workload(spec, self.catalog)
        assert len(instances) == 2194
        assert all(0.0 <= q.arrival_s <= 108_000.0 for q in instances)
        arrivals = [q.arrival_s for q in instances]
        assert arrivals == sorted(arrivals)
        assert [q.instance_id for q in instances] == list(range(2194))

    def test_single_instance_single_template(self):
        catalog = load_catalog(
            {
                "fragments": [{"fragment_id": "f", "table": "t", "size_bytes": 1}],
                "templates": [
                    {"template_id": "only", "fragments_read": ["f"], "cpu_work": 1.0}
                ],
            }
        )
        spec = WorkloadSpec(10.0, "fixed_count", count=1, seed=1)
        instances = generate_workload(spec, catalog)
        assert len(instances) == 1
        assert instances[0].template_id == "only"

    def test_empty_catalog_rejected(self):
        from hybridsim.datamodel import Catalog

        spec = WorkloadSpec(10.0, "fixed_count", count=1, seed=1)
        with pytest.raises(WorkloadError, match="no templates"):
            generate_workload(spec, Catalog((), ()))

    def test_deterministic_for_seed(self):
        spec = WorkloadSpec(5000.0, "poisson", rate_per_s=0.1, seed=99)
        a = generate_workload(spec, self.catalog, ("web", "batch"))
        b = generate_workload(spec, self.catalog, ("web", "batch"))
        assert a == b
        c = generate_workload(
            WorkloadSpec(5000.0, "poisson", rate_per_s=0.1, seed=100),
            self.catalog,
            ("web", "batch"),
        )
        assert a != c

    def test_poisson_count_statistics(self):
        # rate 0.02/s over 1e5 s: expect 2000 +- 3*sqrt(2000) in >=99% of
        # 1000 seeded trials
        catalog = load_catalog(
            {
                "fragments": [{"fragment_id": "f", "table": "t", "size_bytes": 1}],
                "templates": [
                    {"template_id": "only", "fragments_read": ["f"], "cpu_work": 1.0}
                ],
            }
        )
        bound = 3.0 * math.sqrt(2000.0)
        hits = 0
        for seed in range(1000):
            spec = WorkloadSpec(1e5, "poisson", rate_per_s=0.02, seed=seed)
            count = len(generate_workload(spec, catalog))
            if abs(count - 2000) <= bound:
                hits += 1
        assert hits >= 990, f"only {hits}/1000 trials within the 3-sigma band"

    def test_template_mix_matches_weights(self):
        # weights 3:1:1 over 10,000 draws; chi-square df=2 at 0.01 is 9.21
        spec = WorkloadSpec(1e6, "fixed_count", count=10_000, seed=5)
        instances = generate_workload(spec, self.catalog)
        counts = {"T1": 0, "T2": 0, "T3": 0}
        for q in instances:
            counts[q.template_id] += 1
        expected = {"T1": 6000.0, "T2": 2000.0, "T3": 2000.0}
        chi2 = sum((counts[k] - expected[k]) ** 2 / expected[k] for k in counts)
        assert chi2 < 9.21, f"chi-square {chi2}, counts {counts}"
        assert abs(counts["T1"] / 10_000 - 0.6) <= 0.02

    def test_client_classes_uniform(self):
        spec = WorkloadSpec(1e6, "fixed_count", count=9000, seed=11)
        instances = generate_workload(spec, self.catalog, ("a", "b", "c"))
        counts = {"a": 0, "b": 0, "c": 0}
        for q in instances:
            counts[q.client_class] += 1
        for cls, n in counts.items():
            assert abs(n / 9000 - 1 / 3) <= 0.03, f"class {cls}: {n}"

    def test_random_specs_sorted_and_bounded(self):
        rng = np.random.default_rng(321)
        for case in range(200):
            horizon = float(rng.uniform(10.0, 5000.0))
            if rng.random() < 0.5:
                spec = WorkloadSpec(
                    horizon, "fixed_count", count=int(rng.integers(1, 300)),
                    seed=int(rng.integers(0, 2**32)),
                )
            else:
                spec = WorkloadSpec(
                    horizon, "poisson", rate_per_s=float(rng.uniform(0.01, 2.0)),
                    seed=int(rng.integers(0, 2**32)),
                )
            if rng.random() < 0.4:
                start = float(rng.uniform(0.0, horizon * 0.8))
                duration = float(rng.uniform(0.1, horizon - start))
                spec = WorkloadSpec(
                    spec.horizon_s, spec.arrival_kind, spec.rate_per_s, spec.count,
                    (Burst(start, duration, int(rng.integers(1, 40))),), spec.seed,
                )
            instances = generate_workload(spec, self.catalog)
            arrivals = [q.arrival_s for q in instances]
            assert arrivals == sorted(arrivals), f"case {case} not sorted"
            assert all(0.0 <= t <= horizon for t in arrivals), f"case {case} out of range"
            assert [q.instance_id for q in instances] == list(range(len(instances)))


class TestMergeBursts:
    def setup_method(self):
        self.catalog = load_catalog(small_catalog_doc())
        spec = WorkloadSpec(1000.0, "fixed_count", count=80, seed=3)
        self.base = generate_workload(spec, self.catalog)

    def test_no_bursts_identity(self):
        merged = merge_bursts(self.base, [], hrng.stream(3, "bursts"), self.catalog)
        assert merged == self.base

    def test_single_burst_counts_and_window(self):
        burst = Burst(100.0, 10.0, 50)
        merged = merge_bursts(
            self.base, [burst], hrng.stream(3, "bursts"), self.catalog
        )
        assert len(merged) == len(self.base) + 50
        base_in_window = sum(1 for q in self.base if 100.0 <= q.arrival_s <= 110.0)
        in_window = sum(1 for q in merged if 100.0 <= q.arrival_s <= 110.0)
        assert in_window == base_in_window + 50

    def test_overlapping_bursts_additive(self):
        bursts = [Burst(100.0, 20.0, 30), Burst(110.0, 20.0, 25)]
        merged = merge_bursts(
            self.base, bursts, hrng.stream(3, "bursts"), self.catalog
        )
        assert len(merged) == len(self.base) + 55
        arrivals = [q.arrival_s for q in merged]
        assert arrivals == sorted(arrivals)
        assert [q.instance_id for q in merged] == list(range(len(merged)))

    def test_burst_with_fixed_template(self):
        burst = Burst(0.0, 1000.0, 40, template_id="T3")
        merged = merge_bursts(
            self.base, [burst], hrng.stream(3, "bursts"), self.catalog
        )
        t3 = sum(1 for q in merged if q.template_id == "T3")
        base_t3 = sum(1 for q in self.base if q.template_id == "T3")
        assert t3 == base_t3 + 40

    def test_burst_with_unknown_template_rejected(self):
        burst = Burst(0.0, 10.0, 5, template_id="ghost")
        with pytest.raises(WorkloadError, match="unknown template"):
            merge_bursts(self.base, [burst], hrng.stream(3, "bursts"), self.catalog)


class TestWorkloadCsv:
    def test_roundtrip(self):
        catalog = load_catalog(small_catalog_doc())
        spec = WorkloadSpec(500.0, "fixed_count", count=60, seed=8)
        instances = generate_workload(spec, catalog, ("web",))
        text = workload_to_csv(instances)
        assert text.splitlines()[0] == "instance_id,template_id,client_class,arrival_s"
        assert workload_from_csv(text) == instances

    def test_bad_header_rejected(self):
        with pytest.raises(WorkloadError, match="header"):
            workload_from_csv("nope\n1,T,c,0.5\n")

    def test_empty_csv_is_empty_workload(self):
        assert workload_from_csv("instance_id,template_id,client_class,arrival_s\n") == []
