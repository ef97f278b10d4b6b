import pytest

from islandsdb.deployment import make_partition_map
from islandsdb.sim import Sim, execute
from islandsdb.storage import RecordKind, initial_payload, next_payload
from islandsdb.transport import (DecisionValue, ExecBranch, Message, MsgKind, Op,
                                 VoteValue)
from islandsdb.txn import (GlobalTxn, Node, Phase, SiteClass, TxnRequest,
                           classify, handle_message)

from conftest import make_cluster


def test_classify_examples():
    pm24 = make_partition_map(240000, 24)
    c = classify(TxnRequest(Op.READ, (5, 7), 0), pm24)
    assert c.kind is SiteClass.LOCAL and c.participants == {0}

    pm4 = make_partition_map(240000, 4)
    c = classify(TxnRequest(Op.READ, (5, 70000), 0), pm4)
    owners = {next(i for i, lo, hi in pm4.ranges if lo <= k < hi) for k in (5, 70000)}
    assert c.kind is SiteClass.DISTRIBUTED and c.participants == owners == {0, 1}

    pm1 = make_partition_map(240000, 1)
    c = classify(TxnRequest(Op.UPDATE, (1, 100000, 239999), 0, multisite=True), pm1)
    assert c.kind is SiteClass.MULTISITE_LOCAL and len(c.participants) == 1


def test_classify_origin_always_participates():
    pm = make_partition_map(400, 4)
    c = classify(TxnRequest(Op.READ, (150,), 0), pm)
    assert c.kind is SiteClass.DISTRIBUTED and c.participants == {0, 1}


def test_classify_invalid_key():
    with pytest.raises(ValueError):
        classify(TxnRequest(Op.READ, (400,), 0), make_partition_map(400, 4))
    with pytest.raises(ValueError):
        TxnRequest(Op.READ, (), 0)


def test_duplicate_keys_deduplicated():
    assert TxnRequest(Op.READ, (3, 1, 3, 1), 0).unique_keys() == (3, 1)
    cl = make_cluster(2, 1, 100)
    out = execute(TxnRequest(Op.UPDATE, (3, 3, 60, 3), 0), cl)
    assert out.committed
    # one version bump per key, not per occurrence
    assert cl.instances[0].table.get(3).version == 1


def test_global_txn_phases_monotone():
    g = GlobalTxn(1, 0, frozenset({0, 1}))
    g.advance(Phase.PREPARING)
    with pytest.raises(RuntimeError):
        g.advance(Phase.EXECUTING)
    g.votes[1] = VoteValue.NO
    with pytest.raises(RuntimeError):
        g.decide(DecisionValue.COMMIT)
    g.decide(DecisionValue.ABORT)
    assert g.phase is Phase.DECIDED


def _branch(node, gtid, keys, op=Op.UPDATE):
    m = Message(MsgKind.EXEC_BRANCH, gtid, 0, node.id, ExecBranch(op, keys, gtid))
    return handle_message(node, m)


def test_handle_prepare_healthy_votes_yes():
    cl = make_cluster(2, 1, 100)
    node = Node(cl.instances[1])
    r = _branch(node, 7, (60, 61))
    assert r.kind is MsgKind.BRANCH_RESULT and r.body.ok
    v = handle_message(node, Message(MsgKind.PREPARE, 7, 0, 1))
    assert v.kind is MsgKind.VOTE and v.body is VoteValue.YES
    assert v.destination == 0 and v.origin == 1
    # the Prepare record is durable by the time the vote exists
    kinds = [(r.kind, r.gtid) for r in node.instance.wal]
    assert (RecordKind.PREPARE, 7) in kinds


def test_handle_read_only_branch_votes_read_only():
    cl = make_cluster(2, 1, 100)
    node = Node(cl.instances[1])
    r = _branch(node, 3, (55,), Op.READ)
    assert r.body.rows == ((55, initial_payload(55)),)
    v = handle_message(node, Message(MsgKind.PREPARE, 3, 0, 1))
    assert v.body is VoteValue.YES_READ_ONLY
    assert node.branches == {} and node.instance.locks.is_idle()


def test_handle_abort_after_prepare_rolls_back():
    cl = make_cluster(2, 1, 100)
    inst = cl.instances[1]
    before = inst.table.snapshot()
    node = Node(inst)
    _branch(node, 9, (70, 71, 72))
    handle_message(node, Message(MsgKind.PREPARE, 9, 0, 1))
    assert node.in_doubt() == [9]
    ack = handle_message(node, Message(MsgKind.DECISION, 9, 0, 1, DecisionValue.ABORT))
    assert ack.kind is MsgKind.ACK and ack.body is DecisionValue.ABORT
    assert inst.table.snapshot() == before
    assert inst.locks.is_idle()


def test_handle_commit_after_prepare_applies():
    cl = make_cluster(2, 1, 100)
    inst = cl.instances[1]
    node = Node(inst)
    _branch(node, 4, (80,))
    handle_message(node, Message(MsgKind.PREPARE, 4, 0, 1))
    ack = handle_message(node, Message(MsgKind.DECISION, 4, 0, 1, DecisionValue.COMMIT))
    assert ack.body is DecisionValue.COMMIT
    row = inst.table.get(80)
    assert row.payload == next_payload(initial_payload(80), 4) and row.version == 1


def test_handle_unknown_decision_presumed_abort():
    cl = make_cluster(2, 1, 100)
    node = Node(cl.instances[1])
    for d in (DecisionValue.ABORT, DecisionValue.COMMIT):
        ack = handle_message(node, Message(MsgKind.DECISION, 99, 0, 1, d))
        assert ack.kind is MsgKind.ACK and ack.body is DecisionValue.ABORT


def test_abort_overtaking_execution_is_remembered():
    cl = make_cluster(2, 1, 100)
    node = Node(cl.instances[1])
    handle_message(node, Message(MsgKind.DECISION, 5, 0, 1, DecisionValue.ABORT))
    r = _branch(node, 5, (60,))
    assert not r.body.ok
    assert node.branches == {} and node.instance.locks.is_idle()


def test_prepare_unknown_branch_votes_no():
    cl = make_cluster(2, 1, 100)
    v = handle_message(Node(cl.instances[1]), Message(MsgKind.PREPARE, 1, 0, 1))
    assert v.body is VoteValue.NO


def test_branch_lock_conflict_fails():
    cl = make_cluster(2, 2, 100)
    node = Node(cl.instances[1])
    assert _branch(node, 1, (60,)).body.ok
    assert not _branch(node, 2, (60,)).body.ok
    assert 2 not in node.branches


def test_query_answers_known_decision():
    cl = make_cluster(2, 1, 100)
    node = Node(cl.instances[0])
    node.decisions[11] = DecisionValue.COMMIT
    r = handle_message(node, Message(MsgKind.DECISION, 11, 1, 0, DecisionValue.QUERY))
    assert r.kind is MsgKind.DECISION and r.body is DecisionValue.COMMIT
    r = handle_message(node, Message(MsgKind.DECISION, 12, 1, 0, DecisionValue.QUERY))
    assert r.body is DecisionValue.ABORT


def test_execute_distributed_read():
    cl = make_cluster(2, 1, 100)
    sim = Sim(cl, trace=True)
    out = sim.execute(TxnRequest(Op.READ, (10, 60), 0))
    assert out.committed and out.kind is SiteClass.DISTRIBUTED
    assert out.rows == {10: initial_payload(10), 60: initial_payload(60)}
    # one remote participant: ExecBranch, BranchResult, Prepare, Vote
    assert sim.trace.count(out.gtid) == 4


def test_no_vote_leaves_every_table_unchanged():
    cl = make_cluster(4, 1, 400)
    before = [i.table.snapshot() for i in cl.instances]
    cl.instances[2].wal.fail_flush = True
    out = execute(TxnRequest(Op.UPDATE, (1, 150, 250, 350), 0), cl)
    assert not out.committed and out.reason == "vote:no"
    assert [i.table.snapshot() for i in cl.instances] == before
    assert all(i.locks.is_idle() for i in cl.instances)


def test_multisite_local_sends_nothing():
    cl = make_cluster(4, 1, 400)
    sim = Sim(cl, trace=True)
    out = sim.execute(TxnRequest(Op.UPDATE, (1, 5, 99), 0, multisite=True))
    assert out.committed and out.kind is SiteClass.MULTISITE_LOCAL
    assert sim.trace.count(out.gtid) == 0 and sim.trace.events == []


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("op,per_remote", [(Op.READ, 4), (Op.UPDATE, 6)])
def test_message_count_closed_form(k, op, per_remote):
    cl = make_cluster(4, 1, 400)
    sim = Sim(cl, trace=True)
    keys = (7,) + tuple(100 * p + 3 for p in range(1, k + 1))
    out = sim.execute(TxnRequest(op, keys, 0))
    assert out.committed and len(out.participants) == k + 1
    assert sim.trace.count(out.gtid) == per_remote * k
    kinds = sim.trace.by_txn[out.gtid]
    assert kinds[MsgKind.EXEC_BRANCH] == kinds[MsgKind.BRANCH_RESULT] == k
    assert kinds[MsgKind.PREPARE] == kinds[MsgKind.VOTE] == k
    phase2 = k if op is Op.UPDATE else 0
    assert kinds[MsgKind.DECISION] == kinds[MsgKind.ACK] == phase2


def test_prepare_record_precedes_vote_send():
    cl = make_cluster(3, 1, 300)
    sim = Sim(cl, trace=True)
    out = sim.execute(TxnRequest(Op.UPDATE, (1, 101, 201), 0))
    assert out.committed
    for p in (1, 2):
        recs = [r for r in cl.instances[p].wal]
        kinds = [r.kind for r in recs]
        assert kinds.index(RecordKind.PREPARE) < kinds.index(RecordKind.COMMIT)
        assert [r.gtid for r in recs if r.kind is RecordKind.PREPARE] == [out.gtid]
    votes = [e for e in sim.trace.events if e[1] == "send" and e[4] is MsgKind.VOTE]
    assert len(votes) == 2
    # coordinator logs the end of the distributed transaction last
    assert cl.instances[0].wal.records[-1].kind is RecordKind.END_DISTRIBUTED


def test_participant_queries_when_decision_is_late():
    cl = make_cluster(2, 1, 100)
    sim = Sim(cl, timeout_ns=50_000)
    node = sim.nodes[1]
    _branch(node, 1000, (60,))
    handle_message(node, Message(MsgKind.PREPARE, 1000, 0, 1))
    # the coordinator never recorded a decision: presumed abort
    sim._check_in_doubt(1, 1000, 0)
    sim.run()
    assert sim.queries == 1
    assert node.in_doubt() == [] and cl.instances[1].locks.is_idle()
    assert cl.instances[1].table.get(60).version == 0
