"""Quick end-to-end check of the Python bindings.

Build and install first:  pip install --no-build-isolation .
"""

import pathlib
import random

import gsync

PROFILES = pathlib.Path(__file__).resolve().parents[2] / "profiles"


def main():
    prof = gsync.Profile.load(str(PROFILES / "resnet50.json"))
    assert prof.total_params == 25_503_912, prof
    assert len(prof) == len(prof.layer_names())

    eth = gsync.Cluster.ethernet_10g(16)
    plan = gsync.select_plan(prof, eth, 32)
    assert all(16 % g == 0 for g in plan)
    total, compute, exposed = gsync.estimate_iteration_time(prof, eth, 32)
    assert abs(total - (compute + exposed)) <= 1e-12 * total
    assert gsync.estimate_collective_time("allreduce", 0.0, 4, eth) == 6 * eth.alpha

    rng = random.Random(0)
    inputs = [[rng.uniform(-1, 1) for _ in range(1000)] for _ in range(4)]
    exact = [sum(col) for col in zip(*inputs)]
    outs, _ = gsync.collective(inputs, chunk_bytes=1024)
    for out in outs:
        assert max(abs(a - b) for a, b in zip(out, exact)) < 1e-5
    outs, r = gsync.collective(inputs, wire="int8")
    bound = 4 * r / 127
    assert max(abs(a - b) for a, b in zip(outs[0], exact)) <= bound

    on = gsync.simulate(prof, eth, 32, iterations=2)
    off = gsync.simulate(prof, eth, 32, iterations=2, prioritize=False)
    assert on["exposed_comm_s"] <= off["exposed_comm_s"]
    assert on["csv"].startswith("layer_id,")

    rows = gsync.sweep(prof, gsync.Cluster.fabric_100g(1), [1, 4], iterations=2)
    assert rows[0] == (1, rows[0][1], 1.0)

    suites = gsync.validate()
    assert all(ok for _, ok, _ in suites), suites

    try:
        gsync.Profile.load("/no/such/file.json")
    except ValueError:
        pass
    else:
        raise AssertionError("missing profile should raise")

    print(f"smoke test ok: factor {off['exposed_comm_s'] / on['exposed_comm_s']:.2f}, "
          f"{len(suites)} validation suites passed")


if __name__ == "__main__":
    main()
