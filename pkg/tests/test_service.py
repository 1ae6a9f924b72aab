"""HTTP endpoints: status codes, error bodies, artifact payloads."""

from __future__ import annotations

import json

import pytest
from fastapi.testclient import TestClient

import hybridsim.service as service_mod
from hybridsim import __version__
from hybridsim.errors import InternalInvariantError
from hybridsim.service import create_app

from test_runner import base_bundle, control_section


@pytest.fixture()
def client():
    return TestClient(create_app())


class TestHealth:
    def test_health(self, client):
        resp = client.get("/health")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok", "version": __version__}


class TestRunEndpoint:
    def test_run_returns_artifacts(self, client):
        resp = client.post("/run", json=base_bundle())
        assert resp.status_code == 200
        artifacts = resp.json()["artifacts"]
        assert "trace.csv" in artifacts and "manifest.json" in artifacts
        assert json.loads(artifacts["summary.json"])["instance_count"] > 0

    def test_run_matches_direct_execution(self, client):
        from hybridsim.runner import execute_bundle

        direct = execute_bundle(base_bundle())
        via_http = client.post("/run", json=base_bundle()).json()["artifacts"]
        assert via_http["trace.csv"] == direct["trace.csv"]
        assert via_http["workload.csv"] == direct["workload.csv"]

    def test_user_error_is_400_with_code(self, client):
        bundle = base_bundle(placement={"fA": "nowhere", "fB": "pub0"})
        resp = client.post("/run", json=bundle)
        assert resp.status_code == 400
        body = resp.json()
        assert body["code"] == "PLACEMENT_INVALID"
        assert "nowhere" in body["message"]

    def test_error_codes_by_section(self, client):
        bundle = base_bundle()
        bundle["topology"]["links"][0]["bandwidth_Bps"] = 0
        assert client.post("/run", json=bundle).json()["code"] == "TOPOLOGY_INVALID"
        bundle = base_bundle()
        bundle["workload"] = {"spec": {"horizon_s": -1,
                                       "arrival": {"kind": "poisson", "rate_per_s": 1}}}
        assert client.post("/run", json=bundle).json()["code"] == "WORKLOAD_INVALID"
        bundle = base_bundle(mode="closed_loop",
                             control=control_section(controlled_nodes=["pub9"]))
        assert client.post("/run", json=bundle).json()["code"] == "CONTROLLER_INVALID"

    def test_closed_loop_over_http(self, client):
        bundle = base_bundle(mode="closed_loop", control=control_section())
        artifacts = client.post("/run", json=bundle).json()["artifacts"]
        assert "control_trace.csv" in artifacts

    def test_internal_error_is_500(self, client, monkeypatch):
        def boom(bundle):
            raise InternalInvariantError("queue count went negative")

        monkeypatch.setattr(service_mod, "execute_bundle", boom)
        resp = client.post("/run", json=base_bundle())
        assert resp.status_code == 500
        assert resp.json()["code"] == "INTERNAL"


class TestValidateEndpoint:
    def test_valid(self, client):
        resp = client.post("/validate", json=base_bundle())
        assert resp.status_code == 200
        assert resp.json() == {"valid": True, "errors": []}

    def test_invalid_collects_errors(self, client):
        bundle = base_bundle(placement={"fA": "nowhere"})
        body = client.post("/validate", json=bundle).json()
        assert body["valid"] is False
        assert len(body["errors"]) >= 2
        assert all(":" in e for e in body["errors"])

    def test_validate_never_runs_the_workload(self, client):
        # a huge workload validates instantly
        bundle = base_bundle(workload={"spec": {
            "horizon_s": 1e9, "arrival": {"kind": "poisson", "rate_per_s": 100.0}}})
        body = client.post("/validate", json=bundle).json()
        assert body == {"valid": True, "errors": []}
