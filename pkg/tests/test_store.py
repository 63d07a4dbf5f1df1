import json
import threading

from devp2p_observatory import store


def events(n):
    return [{"id": i, "ts": i / 10, "type": "session", "kind": "Checkpoint", "attempts": i} for i in range(n)]


def test_write_then_replay_identical(tmp_path):
    evs = events(10_000)
    path = tmp_path / store.EVENTS
    assert store.write_events(path, evs) == 10_000
    got, warnings = store.replay_log(path)
    assert got == evs and warnings == 0


def test_torn_last_line_dropped_with_warning(tmp_path):
    path = tmp_path / store.EVENTS
    store.write_events(path, events(10_000))
    data = path.read_bytes()
    path.write_bytes(data[:-20])
    got, warnings = store.replay_log(path)
    assert len(got) == 9_999 and warnings == 1


def test_garbage_line_in_middle_skipped(tmp_path):
    path = tmp_path / store.EVENTS
    lines = [store.encode_event(e) for e in events(3)]
    path.write_text(lines[0] + "\n{not json\n" + lines[1] + "\n" + lines[2] + "\n")
    got, warnings = store.replay_log(path)
    assert [e["id"] for e in got] == [0, 1, 2] and warnings == 1


def test_concurrent_producers(tmp_path):
    path = tmp_path / store.EVENTS
    log = store.EventLog(path)

    def produce(k):
        for i in range(2000):
            log.append({"producer": k, "i": i})

    threads = [threading.Thread(target=produce, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    log.close()
    got, warnings = store.replay_log(path)
    assert warnings == 0 and len(got) == 16_000
    assert len({(e["producer"], e["i"]) for e in got}) == 16_000
    for k in range(8):
        assert [e["i"] for e in got if e["producer"] == k] == list(range(2000))


def test_encoding_is_canonical():
    assert store.encode_event({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


def test_peers_and_table_files(tmp_path):
    store.save_peers(tmp_path / store.PEERS, [{"id": "aa"}, {"id": "bb"}])
    assert store.load_peers(tmp_path / store.PEERS) == [{"id": "aa"}, {"id": "bb"}]
    store.save_table(tmp_path / store.TABLE, [json.dumps({"bucket": 1})])
    assert (tmp_path / store.TABLE).read_text().strip() == '{"bucket": 1}'
    assert store.resolve_log(tmp_path) == tmp_path / store.EVENTS
