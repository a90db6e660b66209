import numpy as np

from mixdiv.rng import RngHub


def test_same_name_same_stream():
    a = RngHub(7).stream("lambda.0")
    b = RngHub(7).stream("lambda.0")
    np.testing.assert_array_equal(a.random(16), b.random(16))


def test_distinct_names_differ():
    hub = RngHub(7)
    a = hub.stream("lambda.0").random(16)
    b = hub.stream("lambda.1").random(16)
    assert not np.array_equal(a, b)


def test_distinct_seeds_differ():
    a = RngHub(1).stream("batch").random(16)
    b = RngHub(2).stream("batch").random(16)
    assert not np.array_equal(a, b)


def test_streams_independent_of_consumption_order():
    hub1 = RngHub(11)
    s_a = hub1.stream("a").random(8)
    s_b = hub1.stream("b").random(8)

    hub2 = RngHub(11)
    t_b = hub2.stream("b").random(8)
    t_a = hub2.stream("a").random(8)

    np.testing.assert_array_equal(s_a, t_a)
    np.testing.assert_array_equal(s_b, t_b)


def test_partial_consumption_does_not_leak():
    hub1 = RngHub(3)
    hub1.stream("x").random(1000)
    fresh = hub1.stream("y").random(8)

    hub2 = RngHub(3)
    expected = hub2.stream("y").random(8)
    np.testing.assert_array_equal(fresh, expected)


def test_child_hub_namespaced():
    root = RngHub(5)
    c1 = root.child("worker.0").stream("s").random(8)
    c2 = root.child("worker.1").stream("s").random(8)
    again = RngHub(5).child("worker.0").stream("s").random(8)
    assert not np.array_equal(c1, c2)
    np.testing.assert_array_equal(c1, again)
