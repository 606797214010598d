import io

import numpy as np
import pytest

from gridflow import FixedLoad, GenericGenerator, LosslessLine, Network, NetworkWarning, ValidationError
from gridflow.cases import three_bus
from gridflow.compiler import DeviceConstraint, InfoPattern, NetBalance, compile_network


def test_three_bus_structure():
    net = three_bus()
    assert (net.M, net.N, len(net.devices)) == (10, 3, 7)
    A, B = net.adjacency()
    assert A.shape == (3, 10)
    assert np.all(A.sum(axis=0) == 1)  # every terminal on exactly one net
    assert [b.shape for b in B][2] == (2, 10)
    assert net.terminal_label(3) == "line1[1]"


def test_connect_twice_names_both_nets():
    net = Network()
    net.add_device(FixedLoad(p_fix=1.0), "a")
    net.add_device(FixedLoad(p_fix=1.0), "b")
    net.connect("a", "b", net="x")
    with pytest.raises(ValidationError, match="'x'.*'y'"):
        net.connect("a", net="y")


def test_multi_terminal_device_needs_index():
    net = Network()
    net.add_device(LosslessLine(), "line")
    with pytest.raises(ValidationError, match="line.k"):
        net.connect("line", net="x")


def test_duplicate_device_name_rejected():
    net = Network()
    net.add_device(FixedLoad(p_fix=1.0), "a")
    with pytest.raises(ValidationError, match="duplicate"):
        net.add_device(FixedLoad(p_fix=1.0), "a")


def test_validate_reports_unwired_and_empty_nets():
    net = Network()
    net.add_device(LosslessLine(), "line")
    net.add_net("lonely")
    net.connect("line.0", net="x")
    with pytest.warns(NetworkWarning), pytest.raises(ValidationError) as exc:
        net.validate()
    msgs = " ".join(exc.value.errors)
    assert "line[1]" in msgs and "lonely" in msgs


def test_single_terminal_net_warns():
    net = Network()
    net.add_device(GenericGenerator(alpha=1.0, p_max=5.0), "g")
    net.connect("g", net="alone")
    with pytest.warns(NetworkWarning, match="alone"):
        net.validate()


def test_probabilities_must_sum_to_one():
    with pytest.raises(ValidationError, match="sum to 1"):
        Network(T=2, probabilities=[0.5, 0.6])


def test_device_schedules_checked_against_horizon():
    net = Network(T=3)
    with pytest.raises(ValidationError, match="p_fix"):
        net.add_device(FixedLoad(p_fix=[1.0, 2.0]), "load")


def test_compiled_tags_and_shapes():
    net = three_bus()
    prob = compile_network(net)
    assert prob.terminal_cols.shape == (10, 1, 1)
    assert prob.net_rows.shape == (3, 1, 1)
    tag = prob.row_tag(int(prob.net_rows[1, 0, 0]))
    assert tag == NetBalance("net2", 0, 0)
    tags = {prob.row_tag(i) for i in range(prob.n_rows)}
    assert DeviceConstraint("line2", "limits", 0, 0) in tags


def test_delta_shifts_balance_rows():
    net = three_bus()
    prob = compile_network(net, delta=np.full((3, 1, 1), 2.0))
    rows = prob.net_rows.ravel()
    assert np.all(prob.l[rows] == -2.0) and np.all(prob.u[rows] == -2.0)
    with pytest.raises(ValueError, match="delta"):
        compile_network(net, delta=np.zeros(5))


def test_information_pattern_rows_for_scenarios():
    net = Network(T=2, probabilities=[0.25, 0.75])
    net.add_device(GenericGenerator(alpha=1.0, p_max=100.0), "gen")
    net.add_device(FixedLoad(p_fix=np.array([[1.0, 1.0], [2.0, 5.0]])), "load")
    net.connect("gen", "load", net="bus")
    prob = compile_network(net)
    info = [prob.row_tag(i) for i in range(prob.n_rows) if isinstance(prob.row_tag(i), InfoPattern)]
    assert len(info) == 2  # one per terminal, scenario 1 tied to scenario 0
    assert {t.column.device for t in info} == {"gen", "load"}


def test_dump_triplets_round_trip():
    prob = compile_network(three_bus())
    buf = io.StringIO()
    prob.dump_triplets(buf)
    text = buf.getvalue().splitlines()
    assert text[0].startswith(f"# n {prob.n_vars} m {prob.n_rows}")
    c_at = next(i for i, s in enumerate(text) if s.startswith("C "))
    nnz = int(text[c_at].split()[1])
    assert nnz == prob.C.nnz
    i, j, v = text[c_at + 1].split()
    assert prob.C[int(i), int(j)] == float(v)


def test_regularization_adds_diagonal():
    net = three_bus()
    base = compile_network(net)
    reg = compile_network(net, regularization=0.5)
    cols = base.terminal_cols.ravel()
    diff = (reg.P - base.P).diagonal()[cols]
    assert np.allclose(diff, 1.0)
