from __future__ import annotations

import json
import stat
from pathlib import Path

import pytest

from gplmt.parser import load_experiment
from gplmt.scheduler import VirtualTimeEventLoop


def run_virtual(coro):
    """Drive a coroutine on the virtual-time loop until it completes."""
    loop = VirtualTimeEventLoop()
    try:
        return loop.run_until_complete(coro)
    finally:
        loop.close()


@pytest.fixture
def load_xml(tmp_path):
    """Write an experiment document and load it, asserting zero errors."""

    def _load(xml: str, name: str = "exp.xml"):
        path = tmp_path / name
        path.write_text(xml, encoding="utf-8")
        experiment, diagnostics = load_experiment(path)
        assert experiment is not None, [str(d) for d in diagnostics]
        return experiment

    return _load


@pytest.fixture
def run_dir(tmp_path):
    d = tmp_path / "rundir"
    d.mkdir()
    return d


def events_of(run_dir: Path) -> list[dict]:
    lines = (run_dir / "events.jsonl").read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines]


FAKE_SSH = """#!/bin/bash
# Imitates the ssh client surface the transport relies on: master setup
# (-N -f), command execution after --, and -O exit. Commands run locally.
master=0
ctl=""
dest=""
while [[ $# -gt 0 ]]; do
  case "$1" in
    -o) case "$2" in ControlMaster=*) master=1;; esac; shift 2;;
    -n|-N|-f) shift;;
    -O) ctl="$2"; shift 2;;
    --) shift; break;;
    *) dest="$1"; shift;;
  esac
done
if [[ -n "$ctl" ]]; then exit 0; fi
if [[ $master == 1 ]]; then exit "${FAKE_SSH_CONNECT_EXIT:-0}"; fi
exec /bin/sh -c "$1"
"""


@pytest.fixture
def fake_ssh(tmp_path, monkeypatch):
    """Install a stand-in ssh executable and point the transport at it."""
    path = tmp_path / "fake-ssh"
    path.write_text(FAKE_SSH, encoding="utf-8")
    path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    monkeypatch.setenv("GPLMT_SSH_CLIENT", str(path))
    return path
