"""SDK acceptance: golden frames, deploy-script run, dependency interface."""

from __future__ import annotations

from pathlib import Path

from golden_catalog import catalog
from test_end_to_end import (  # reuse the fixtures and scenario bodies
    cluster,
    client,
    test_dependency_interface_compiles_triggers,
    test_stream_deploy_script_end_to_end,
)

FIXTURES = Path(__file__).resolve().parent / "fixtures"


def test_acceptance_golden_frames():
    for name, frame in catalog():
        golden = (FIXTURES / f"{name}.bin").read_bytes()
        assert frame == golden, f"{name}: encoding diverges"
    print(f"ACCEPTANCE sdk golden frames ({len(catalog())} messages): PASS")


def test_acceptance_stream_script(client):
    test_stream_deploy_script_end_to_end(client)
    print("ACCEPTANCE sdk stream deploy script end-to-end: PASS")


def test_acceptance_dependency_interface(client):
    test_dependency_interface_compiles_triggers(client)
    print("ACCEPTANCE sdk dependency interface via list_triggers: PASS")
