#!/usr/bin/env python3
"""
Tests for the parameter and data-buffer servers under concurrent callers
"""
import random
import threading

import numpy as np
import pytest

from asyncdyna.envs import PointMass, Trajectory, Transition, collect_rollout
from asyncdyna.errors import InvalidArgumentError
from asyncdyna.servers import (DataBufferServer, MessageType, ParamBlob, ParamServer, decode_message, drain,
                               encode_message, pull_params, push_params, push_trajectory)


def tagged_trajectory(tag):
    s = np.array([float(tag)])
    return Trajectory([Transition(s, np.zeros(1), s.copy(), 0.0, 0)], 0.0, env_seed=tag)


def test_param_server_versions_start_at_one():
    server = ParamServer("policy", kind="policy")
    assert server.version == 0
    assert pull_params(server) is None
    assert push_params(server, ParamBlob.create("policy", b"a")) == 1
    assert push_params(server, ParamBlob.create("policy", b"b")) == 2
    blob, version = server.pull()
    assert version == 2
    assert blob.payload == b"b"


def test_param_server_rejects_wrong_kind_and_tampered_blob():
    server = ParamServer("model", kind="model")
    with pytest.raises(InvalidArgumentError):
        server.push(ParamBlob.create("policy", b"x"))
    blob = ParamBlob.create("model", b"payload")
    object.__setattr__(blob, "payload", b"tampered")
    with pytest.raises(InvalidArgumentError):
        server.push(blob)
    assert server.version == 0


def test_blob_info_lookup():
    blob = ParamBlob.create("model", b"", {"val_loss": 0.5, "epoch": 3})
    assert blob.get("val_loss") == 0.5
    assert blob.get("missing", -1.0) == -1.0
    assert blob.verify()


def test_concurrent_pushes_get_distinct_versions():
    server = ParamServer("policy")
    versions = []
    lock = threading.Lock()

    def pusher(worker):
        for i in range(100):
            version = server.push(ParamBlob.create("policy", f"{worker}-{i}".encode()))
            with lock:
                versions.append(version)

    threads = [threading.Thread(target=pusher, args=(w,)) for w in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert server.version == 400
    assert sorted(versions) == list(range(1, 401))


def test_concurrent_pulls_never_see_torn_blobs():
    server = ParamServer("model")
    stop = threading.Event()
    failures = []

    def reader():
        last = 0
        while not stop.is_set():
            slot = server.pull()
            if slot is None:
                continue
            blob, version = slot
            if not blob.verify() or version < last or blob.payload != str(version).encode() * 64:
                failures.append(version)
            last = version

    readers = [threading.Thread(target=reader) for _ in range(3)]
    for t in readers:
        t.start()
    for v in range(1, 301):
        server.push(ParamBlob.create("model", str(v).encode() * 64))
    stop.set()
    for t in readers:
        t.join()
    assert failures == []


def test_drain_returns_push_order_and_empties():
    server = DataBufferServer()
    for tag in range(5):
        assert push_trajectory(server, tagged_trajectory(tag)) == tag + 1
    assert server.pending_count == 5
    drained = drain(server)
    assert [t.env_seed for t in drained] == [0, 1, 2, 3, 4]
    assert server.drain() == []
    assert server.total_pushed == 5


def test_interleaved_push_and_drain_loses_nothing():
    server = DataBufferServer()
    received = []
    done = threading.Event()

    def producer(offset):
        rng = random.Random(offset)
        for i in range(100):
            server.push(tagged_trajectory(offset * 1000 + i))
            if rng.random() < 0.1:
                threading.Event().wait(0.0001)

    def consumer():
        while not done.is_set():
            received.extend(server.drain())
        received.extend(server.drain())

    consumer_thread = threading.Thread(target=consumer)
    consumer_thread.start()
    producers = [threading.Thread(target=producer, args=(p,)) for p in range(4)]
    for t in producers:
        t.start()
    for t in producers:
        t.join()
    done.set()
    consumer_thread.join()

    tags = [t.env_seed for t in received]
    assert len(tags) == 400
    assert len(set(tags)) == 400
    for p in range(4):
        own = [tag for tag in tags if tag // 1000 == p]
        assert own == sorted(own)
    assert server.total_pushed == 400


def test_push_validates_trajectories():
    server = DataBufferServer()
    with pytest.raises(InvalidArgumentError):
        server.push("not a trajectory")
    with pytest.raises(InvalidArgumentError):
        server.push(Trajectory([], 0.0, env_seed=0))
    assert server.total_pushed == 0


def test_subscribers_see_running_total():
    server = DataBufferServer()
    seen = []
    server.subscribe(lambda traj, total: seen.append((traj.env_seed, total)))
    env = PointMass(horizon=3)
    for seed in (7, 8):
        server.push(collect_rollout(env, lambda obs: np.zeros(2), env_seed=seed))
    assert seen == [(7, 1), (8, 2)]


def test_message_codec():
    data = encode_message(MessageType.PUSH_PARAMS, 12, b"abc")
    assert len(data) == 1 + 8 + 4 + 3
    assert decode_message(data) == (MessageType.PUSH_PARAMS, 12, b"abc")
    with pytest.raises(InvalidArgumentError):
        decode_message(data[:-1])
    with pytest.raises(InvalidArgumentError):
        decode_message(encode_message(MessageType.DRAIN, 0)[:5])
    with pytest.raises(InvalidArgumentError):
        decode_message(bytes([9]) + data[1:])
