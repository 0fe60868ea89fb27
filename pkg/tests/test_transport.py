from __future__ import annotations

import asyncio
import json
import os
import time

import pytest

from gplmt.model import TargetDef, TargetKind, TaskOutcome
from gplmt.scheduler import RealClock, VirtualClock
from gplmt.transport import (
    AuthUnsupported,
    ConnectFailed,
    LocalFileMissing,
    LocalTransport,
    MockNodeScript,
    MockRule,
    MockScript,
    MockTransport,
    RateLimiter,
    RateLimiterConfig,
    RemoteFileMissing,
    RetriesExhausted,
    SessionClosed,
    SessionPool,
    SessionState,
    SshTransport,
    TransportError,
    Unreachable,
    make_transport_factory,
    ssh_client_executable,
)

from .conftest import run_virtual
from .oracles import backoff_attempt_offsets, limiter_grant_times, max_in_sliding_window


def mock_node(name="alpha"):
    return TargetDef(name=name, kind=TargetKind.SSH, ssh_user="u", ssh_host=f"{name}.example.org")


def mock_pool(script=None, emit=None, artifact_root=None, reconnect_budget=8):
    clock = VirtualClock()
    factory = make_transport_factory(clock, script or MockScript.empty(), force_mock=True)
    pool = SessionPool(factory, emit=emit, artifact_root=artifact_root,
                       reconnect_budget=reconnect_budget)
    return pool, clock


def unlimited():
    return RateLimiter(None, VirtualClock())


# --- rate limiter ---


@pytest.mark.parametrize("attempts,interval", [(0, 1.0), (-1, 1.0), (5, 0.0), (5, -2.0)])
def test_limiter_config_rejects_non_positive_values(attempts, interval):
    with pytest.raises(ValueError):
        RateLimiterConfig(attempts, interval)


def test_limiter_grant_schedule_matches_oracle():
    clock = VirtualClock()
    limiter = RateLimiter(RateLimiterConfig(2, 1.0), clock)

    async def scenario():
        grants = []
        for _ in range(5):
            await limiter.wait()
            grants.append(clock.now())
        return grants

    grants = run_virtual(scenario())
    assert grants == limiter_grant_times(5, 2, 1.0)  # [0, 0, 1, 1, 2]


def test_limiter_window_never_exceeded():
    clock = VirtualClock()
    limiter = RateLimiter(RateLimiterConfig(3, 2.0), clock)

    async def scenario():
        grants = []

        async def one():
            await limiter.wait()
            grants.append(clock.now())

        await asyncio.gather(*[one() for _ in range(11)])
        return grants

    grants = run_virtual(scenario())
    assert len(grants) == 11
    assert max_in_sliding_window(grants, 2.0) <= 3


def test_limiter_window_slides_with_uneven_demand():
    clock = VirtualClock()
    limiter = RateLimiter(RateLimiterConfig(2, 1.0), clock)

    async def scenario():
        grants = []
        await limiter.wait()
        grants.append(clock.now())
        await clock.sleep(0.5)
        await limiter.wait()
        grants.append(clock.now())
        # window [-0.4, 0.6] already holds two grants; the one at 0.0
        # leaves the window at 1.0 and the one at 0.5 at 1.5
        await clock.sleep(0.1)
        await limiter.wait()
        grants.append(clock.now())
        await limiter.wait()
        grants.append(clock.now())
        return grants

    assert run_virtual(scenario()) == [0.0, 0.5, 1.0, 1.5]


def test_limiter_none_config_is_unlimited():
    clock = VirtualClock()
    limiter = RateLimiter(None, clock)

    async def scenario():
        for _ in range(50):
            await limiter.wait()
        return clock.now()

    assert run_virtual(scenario()) == 0.0


def test_limiter_serves_waiters_in_fifo_order():
    clock = VirtualClock()
    limiter = RateLimiter(RateLimiterConfig(1, 1.0), clock)

    async def scenario():
        order = []

        async def one(tag):
            await limiter.wait()
            order.append(tag)

        await asyncio.gather(*[one(i) for i in range(5)])
        return order

    assert run_virtual(scenario()) == [0, 1, 2, 3, 4]


# --- mock script parsing ---


def test_mock_script_defaults():
    script = MockScript.from_json("{}")
    assert script.nodes == {}
    assert script.strict_files is False
    node = script.node_script("anything")
    assert node == MockNodeScript()
    assert node.available and node.reconnectable


def test_mock_script_full_parse():
    text = json.dumps({
        "nodes": {
            "alpha": {
                "rules": [
                    {"pattern": "ping*", "exit": 1, "duration": 2.5,
                     "stdout": "out", "stderr": "err"},
                    {"pattern": "*"},
                ],
                "available": False,
                "reconnectable": False,
                "connect_failures": 3,
                "lose_connection_at": [2, 4.5],
                "files": {"/tmp/x": "payload"},
            }
        },
        "strict_files": True,
    })
    script = MockScript.from_json(text)
    assert script.strict_files is True
    node = script.node_script("alpha")
    assert node.rules[0] == MockRule("ping*", 1, 2.5, "out", "err")
    assert node.rules[1] == MockRule("*")
    assert node.available is False
    assert node.reconnectable is False
    assert node.connect_failures == 3
    assert node.lose_connection_at == (2.0, 4.5)
    assert node.files == {"/tmp/x": b"payload"}


def test_mock_script_wildcard_fallback():
    script = MockScript.from_json('{"nodes": {"*": {"rules": [{"pattern": "x", "exit": 9}]}, '
                                  '"beta": {}}}')
    assert script.node_script("gamma").rules[0].exit_code == 9
    assert script.node_script("beta").rules == ()  # exact name wins over "*"


def test_mock_script_from_file(tmp_path):
    path = tmp_path / "script.json"
    path.write_text('{"nodes": {"n": {"connect_failures": 2}}}')
    assert MockScript.from_file(path).node_script("n").connect_failures == 2


# --- mock transport semantics ---


def exec_under_mock(script_json, command, deadline=None, node="alpha"):
    script = MockScript.from_json(script_json)
    clock = VirtualClock()
    transport = MockTransport(mock_node(node), clock, script)

    async def scenario():
        await transport.connect()
        output = await transport.exec(command, (), deadline)
        return output, clock.now()

    return run_virtual(scenario())


def test_mock_exec_first_matching_rule_wins():
    script = ('{"nodes": {"alpha": {"rules": ['
              '{"pattern": "ping *", "exit": 3, "duration": 1},'
              '{"pattern": "*", "exit": 7}]}}}')
    output, now = exec_under_mock(script, "ping host-b")
    assert (output.exit_code, now) == (3, 1.0)
    output, now = exec_under_mock(script, "traceroute host-b")
    assert (output.exit_code, now) == (7, 0.0)


def test_mock_exec_unmatched_command_succeeds_instantly():
    output, now = exec_under_mock("{}", "anything at all")
    assert output.exit_code == 0
    assert output.stdout == b""
    assert now == 0.0


def test_mock_exec_scripted_output():
    script = ('{"nodes": {"alpha": {"rules": ['
              '{"pattern": "*", "stdout": "hello", "stderr": "oops"}]}}}')
    output, _ = exec_under_mock(script, "run it")
    assert output.stdout == b"hello"
    assert output.stderr == b"oops"


def test_mock_exec_deadline_cuts_execution():
    script = '{"nodes": {"alpha": {"rules": [{"pattern": "*", "duration": 10}]}}}'
    output, now = exec_under_mock(script, "slow", deadline=3.0)
    assert output.timed_out is True
    assert now == 3.0


def test_mock_exec_connection_loss_mid_command():
    script = ('{"nodes": {"alpha": {"rules": [{"pattern": "*", "duration": 10}],'
              '"lose_connection_at": [4.0]}}}')
    output, now = exec_under_mock(script, "slow")
    assert output.connection_lost is True
    assert now == 4.0


def test_mock_exec_loss_beats_later_deadline():
    script = ('{"nodes": {"alpha": {"rules": [{"pattern": "*", "duration": 10}],'
              '"lose_connection_at": [2.0]}}}')
    output, now = exec_under_mock(script, "slow", deadline=5.0)
    assert output.connection_lost is True
    assert now == 2.0


def test_mock_exec_deadline_beats_later_loss():
    script = ('{"nodes": {"alpha": {"rules": [{"pattern": "*", "duration": 10}],'
              '"lose_connection_at": [5.0]}}}')
    output, now = exec_under_mock(script, "slow", deadline=2.0)
    assert output.timed_out is True
    assert now == 2.0


def test_mock_stale_loss_instants_are_discarded():
    # losses scheduled before the command starts must not strike
    script = MockScript.from_json(
        '{"nodes": {"alpha": {"rules": [{"pattern": "*", "duration": 1}],'
        '"lose_connection_at": [0.5]}}}')
    clock = VirtualClock()
    transport = MockTransport(mock_node(), clock, script)

    async def scenario():
        await transport.connect()
        await clock.sleep(2.0)
        return await transport.exec("late", (), None)

    output = run_virtual(scenario())
    assert output.connection_lost is False
    assert output.exit_code == 0


def test_mock_unavailable_node_refuses_connect():
    script = MockScript.from_json('{"nodes": {"alpha": {"available": false}}}')
    transport = MockTransport(mock_node(), VirtualClock(), script)
    with pytest.raises(Unreachable):
        run_virtual(transport.connect())


def test_mock_fetch_unscripted_path_depends_on_strict_files(tmp_path):
    async def fetch_with(script_text):
        transport = MockTransport(mock_node(), VirtualClock(),
                                  MockScript.from_json(script_text))
        await transport.connect()
        await transport.fetch("/var/log/missing", tmp_path / "out.bin")
        return (tmp_path / "out.bin").read_bytes()

    assert run_virtual(fetch_with("{}")) == b""
    with pytest.raises(RemoteFileMissing):
        run_virtual(fetch_with('{"strict_files": true}'))


def test_mock_push_then_fetch_round_trip(tmp_path):
    source = tmp_path / "in.bin"
    payload = bytes(range(256)) * 8
    source.write_bytes(payload)
    transport = MockTransport(mock_node(), VirtualClock(), MockScript.empty())

    async def scenario():
        await transport.connect()
        await transport.push(source, "/remote/data.bin")
        await transport.fetch("/remote/data.bin", tmp_path / "back.bin")

    run_virtual(scenario())
    assert (tmp_path / "back.bin").read_bytes() == payload


# --- sessions ---


def test_session_refuses_exec_before_connect():
    pool, clock = mock_pool()
    target = mock_node()
    factory = pool.transport_factory

    async def scenario():
        from gplmt.transport import Session
        session = Session(target.name, factory(target), clock, pool)
        with pytest.raises(SessionClosed):
            await session.exec("true")

    run_virtual(scenario())


def test_session_classifies_exit_codes():
    script = MockScript.from_json(
        '{"nodes": {"alpha": {"rules": [{"pattern": "bad", "exit": 2}]}}}')
    pool, clock = mock_pool(script)

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        good = await session.exec("good")
        bad = await session.exec("bad")
        return good, bad

    good, bad = run_virtual(scenario())
    assert good.outcome is TaskOutcome.SUCCESS
    assert good.exit_code == 0
    assert bad.outcome is TaskOutcome.FAILED
    assert bad.exit_code == 2


def test_session_timeout_and_loss_outcomes():
    script = MockScript.from_json(
        '{"nodes": {"alpha": {"rules": [{"pattern": "*", "duration": 10}],'
        '"lose_connection_at": [12.0]}}}')
    pool, clock = mock_pool(script)
    seen = []
    pool._emit = lambda kind, node, detail: seen.append(kind)

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        timed = await session.exec("one", deadline=5.0)
        lost = await session.exec("two")
        return timed, lost, session.state

    timed, lost, state = run_virtual(scenario())
    assert timed.outcome is TaskOutcome.TIMED_OUT
    assert lost.outcome is TaskOutcome.CONNECTION_LOST
    assert state is SessionState.LOST
    assert seen.count("ConnectLost") == 1


def test_session_captures_artifacts_when_labeled(tmp_path):
    script = MockScript.from_json(
        '{"nodes": {"alpha": {"rules": [{"pattern": "*", "stdout": "data", "stderr": "warn"}]}}}')
    pool, clock = mock_pool(script, artifact_root=tmp_path)

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        labeled = await session.exec("x", artifact_label="0-0")
        plain = await session.exec("x")
        return labeled, plain

    labeled, plain = run_virtual(scenario())
    assert labeled.stdout_ref == "alpha/stdout-0-0.log"
    assert labeled.stderr_ref == "alpha/stderr-0-0.log"
    assert (tmp_path / "alpha" / "stdout-0-0.log").read_bytes() == b"data"
    assert (tmp_path / "alpha" / "stderr-0-0.log").read_bytes() == b"warn"
    assert plain.stdout_ref == "" and plain.stderr_ref == ""


def test_session_fetch_lands_in_node_directory(tmp_path):
    script = MockScript.from_json(
        '{"nodes": {"alpha": {"files": {"/var/log/out.pcap": "bytes!"}}}}')
    pool, clock = mock_pool(script, artifact_root=tmp_path)

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        return await session.fetch("/var/log/out.pcap")

    destination = run_virtual(scenario())
    assert destination == tmp_path / "alpha" / "out.pcap"
    assert destination.read_bytes() == b"bytes!"


@pytest.mark.parametrize("path", ["/", ".", "..", "logs/.."])
def test_session_fetch_rejects_non_file_paths(tmp_path, path):
    pool, clock = mock_pool(artifact_root=tmp_path)

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        with pytest.raises(RemoteFileMissing):
            await session.fetch(path)

    run_virtual(scenario())


def test_session_fetch_requires_some_destination():
    pool, clock = mock_pool()  # no artifact root configured

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        with pytest.raises(TransportError):
            await session.fetch("/var/log/x")

    run_virtual(scenario())


def test_session_push_requires_local_file(tmp_path):
    pool, clock = mock_pool()

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        with pytest.raises(LocalFileMissing):
            await session.push(tmp_path / "absent.bin", "/remote/x")

    run_virtual(scenario())


def test_session_close_is_terminal():
    pool, clock = mock_pool()

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        await session.close()
        assert session.state is SessionState.CLOSED
        with pytest.raises(SessionClosed):
            await session.exec("true")
        with pytest.raises(SessionClosed):
            await pool.reconnect(session, unlimited(), clock)

    run_virtual(scenario())


# --- session pool ---


def test_pool_reuses_connection_per_node():
    events = []
    pool, clock = mock_pool(emit=lambda k, n, d: events.append((k, n, d)))

    async def scenario():
        first = await pool.acquire(mock_node(), unlimited(), clock)
        for _ in range(49):
            again = await pool.acquire(mock_node(), unlimited(), clock)
            assert again is first
        return first.connect_count

    assert run_virtual(scenario()) == 1
    assert [e[0] for e in events] == ["ConnectAttempt", "ConnectSuccess"]


def test_pool_keeps_one_session_per_node():
    pool, clock = mock_pool()

    async def scenario():
        a = await pool.acquire(mock_node("alpha"), unlimited(), clock)
        b = await pool.acquire(mock_node("beta"), unlimited(), clock)
        assert a is not b
        return sorted(s.node for s in pool.live_sessions())

    assert run_virtual(scenario()) == ["alpha", "beta"]


def test_pool_refuses_group_targets():
    pool, clock = mock_pool()
    group = TargetDef(name="all", kind=TargetKind.GROUP, members=(mock_node(),))

    async def scenario():
        with pytest.raises(ValueError):
            await pool.acquire(group, unlimited(), clock)

    run_virtual(scenario())


def test_pool_acquire_reconnects_lost_sessions():
    events = []
    pool, clock = mock_pool(emit=lambda k, n, d: events.append(k))

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        session.mark_lost()
        again = await pool.acquire(mock_node(), unlimited(), clock)
        assert again is session
        return session.connect_count, session.state

    count, state = run_virtual(scenario())
    assert count == 2
    assert state is SessionState.CONNECTED
    assert events == ["ConnectAttempt", "ConnectSuccess", "ConnectLost",
                      "ConnectAttempt", "ConnectSuccess"]


def test_reconnect_backoff_schedule_matches_oracle():
    script = MockScript.from_json('{"nodes": {"alpha": {"connect_failures": 3}}}')
    attempts = []
    pool, clock = mock_pool(script)
    pool._emit = lambda kind, node, detail: (
        attempts.append(clock.now()) if kind == "ConnectAttempt" else None)

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        session.mark_lost()
        base = clock.now()
        await pool.reconnect(session, unlimited(), clock)
        return base, session.state

    base, state = run_virtual(scenario())
    assert state is SessionState.CONNECTED
    # attempts[0] is the initial connect; reconnect attempts follow the
    # exponential backoff offsets 0, 1, 3, 7 from the loss instant
    offsets = [t - base for t in attempts[1:]]
    assert offsets == backoff_attempt_offsets(4)


def test_reconnect_budget_exhaustion():
    script = MockScript.from_json('{"nodes": {"alpha": {"reconnectable": false}}}')
    attempts = []
    pool, clock = mock_pool(script, reconnect_budget=5)
    pool._emit = lambda kind, node, detail: (
        attempts.append(clock.now()) if kind == "ConnectAttempt" else None)

    async def scenario():
        session = await pool.acquire(mock_node(), unlimited(), clock)
        session.mark_lost()
        with pytest.raises(RetriesExhausted):
            await pool.reconnect(session, unlimited(), clock)
        return session.state

    assert run_virtual(scenario()) is SessionState.LOST
    assert [t - 0.0 for t in attempts[1:]] == backoff_attempt_offsets(5)


def test_reconnect_attempts_respect_the_limiter():
    limiter_clock = VirtualClock()
    attempts = []
    pool, clock = mock_pool()
    pool._emit = lambda kind, node, detail: (
        attempts.append(clock.now()) if kind == "ConnectAttempt" else None)
    limiter = RateLimiter(RateLimiterConfig(1, 2.0), limiter_clock)

    async def scenario():
        for name in ("alpha", "beta", "gamma"):
            await pool.acquire(mock_node(name), limiter, clock)

    run_virtual(scenario())
    assert attempts == [0.0, 2.0, 4.0]


def test_close_all_closes_every_session():
    pool, clock = mock_pool()

    async def scenario():
        await pool.acquire(mock_node("alpha"), unlimited(), clock)
        await pool.acquire(mock_node("beta"), unlimited(), clock)
        await pool.close_all()
        return pool.live_sessions()

    assert run_virtual(scenario()) == []


# --- local transport ---


def local_target():
    return TargetDef(name="controller", kind=TargetKind.LOCAL)


def test_local_exec_runs_real_processes():
    transport = LocalTransport(local_target(), RealClock())

    async def scenario():
        await transport.connect()
        return await transport.exec("printf hello; printf oops >&2; exit 4", (), None)

    output = asyncio.run(scenario())
    assert output.stdout == b"hello"
    assert output.stderr == b"oops"
    assert output.exit_code == 4


def test_local_exec_exports_environment():
    transport = LocalTransport(local_target(), RealClock())

    async def scenario():
        return await transport.exec('printf "%s" "$GREETING"',
                                    (("GREETING", "hi there"),), None)

    assert asyncio.run(scenario()).stdout == b"hi there"


def test_local_exec_deadline_kills_process_group():
    clock = RealClock()
    transport = LocalTransport(local_target(), clock)

    async def scenario():
        return await transport.exec("sleep 30", (), clock.now() + 0.2)

    started = time.monotonic()
    output = asyncio.run(scenario())
    assert output.timed_out is True
    assert time.monotonic() - started < 5.0


def test_local_fetch_and_push_copy_files(tmp_path):
    transport = LocalTransport(local_target(), RealClock())
    source = tmp_path / "src.bin"
    source.write_bytes(b"x" * 4096)

    async def scenario():
        await transport.fetch(str(source), tmp_path / "fetched.bin")
        await transport.push(tmp_path / "fetched.bin", str(tmp_path / "deep" / "pushed.bin"))
        with pytest.raises(RemoteFileMissing):
            await transport.fetch(str(tmp_path / "nope"), tmp_path / "x")

    asyncio.run(scenario())
    assert (tmp_path / "fetched.bin").read_bytes() == b"x" * 4096
    assert (tmp_path / "deep" / "pushed.bin").read_bytes() == b"x" * 4096
    assert not list(tmp_path.glob("*.part"))  # no stray temp files


# --- ssh transport (external client stand-in) ---


def ssh_target(password=None):
    return TargetDef(name="alpha", kind=TargetKind.SSH, ssh_user="deploy",
                     ssh_host="alpha.example.org", ssh_password=password)


def test_ssh_client_executable_env_override(monkeypatch):
    monkeypatch.delenv("GPLMT_SSH_CLIENT", raising=False)
    assert ssh_client_executable() == "ssh"
    monkeypatch.setenv("GPLMT_SSH_CLIENT", "/opt/bin/ssh")
    assert ssh_client_executable() == "/opt/bin/ssh"


def test_ssh_rejects_password_targets(fake_ssh):
    transport = SshTransport(ssh_target(password="hunter2"), RealClock())
    with pytest.raises(AuthUnsupported):
        asyncio.run(transport.connect())


def test_ssh_connect_failure_surfaces_stderr(fake_ssh, monkeypatch):
    monkeypatch.setenv("FAKE_SSH_CONNECT_EXIT", "255")
    transport = SshTransport(ssh_target(), RealClock())
    with pytest.raises(ConnectFailed):
        asyncio.run(transport.connect())


def test_ssh_exec_round_trips_env_quoting(fake_ssh):
    transport = SshTransport(ssh_target(), RealClock())
    tricky = "s3 cr'et\"$x"

    async def scenario():
        await transport.connect()
        output = await transport.exec('printf "%s" "$SECRET"',
                                      (("SECRET", tricky),), None)
        await transport.close()
        return output

    output = asyncio.run(scenario())
    assert output.exit_code == 0
    assert output.stdout.decode() == tricky


def test_ssh_exit_255_means_connection_lost(fake_ssh):
    transport = SshTransport(ssh_target(), RealClock())

    async def scenario():
        await transport.connect()
        output = await transport.exec("exit 255", (), None)
        await transport.close()
        return output

    output = asyncio.run(scenario())
    assert output.connection_lost is True
    assert output.exit_code == 255


def test_ssh_fetch_and_push_use_the_channel(fake_ssh, tmp_path):
    transport = SshTransport(ssh_target(), RealClock())
    remote = tmp_path / "remote.bin"
    payload = os.urandom(2048)
    remote.write_bytes(payload)
    local = tmp_path / "local.bin"
    local.write_bytes(payload[::-1])

    async def scenario():
        await transport.connect()
        await transport.fetch(str(remote), tmp_path / "fetched.bin")
        await transport.push(local, str(tmp_path / "pushed.bin"))
        with pytest.raises(RemoteFileMissing):
            await transport.fetch(str(tmp_path / "missing.bin"), tmp_path / "x.bin")
        await transport.close()

    asyncio.run(scenario())
    assert (tmp_path / "fetched.bin").read_bytes() == payload
    assert (tmp_path / "pushed.bin").read_bytes() == payload[::-1]


# --- factory selection ---


def test_factory_picks_transport_by_target_kind():
    clock = RealClock()
    factory = make_transport_factory(clock)
    assert isinstance(factory(local_target()), LocalTransport)
    assert isinstance(factory(ssh_target()), SshTransport)
    planetlab = TargetDef(name="p", kind=TargetKind.PLANETLAB,
                          planetlab_api_url="https://x/", planetlab_slice="s")
    with pytest.raises(ValueError):
        factory(planetlab)


def test_factory_force_mock_overrides_kind():
    factory = make_transport_factory(VirtualClock(), force_mock=True)
    assert isinstance(factory(local_target()), MockTransport)
    assert isinstance(factory(ssh_target()), MockTransport)
