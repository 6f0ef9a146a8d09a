"""Smoke test for the esdi Python extension.

Build and install first, e.g.:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/esdi-*.whl
"""

import json

import esdi


def star():
    # leaves A=0, B=1, D=3 around C=2, two channels per link
    nodes = [(i, 1.0) for i in range(4)]
    links = [(0, 2, 2, 1.0), (1, 2, 2, 1.0), (3, 2, 2, 1.0)]
    return esdi.Network(nodes, links, [(0, 1), (0, 3)])


def main():
    net = star()
    assert esdi.solve_single_pair_edr(net, (0, 1)) == 2.0

    sol = esdi.solve_max_total(net)
    report = esdi.check_solution(net, sol)
    assert report["passes"], report
    assert abs(sol.total_eta - 2.0) < 1e-9

    lex = esdi.solve_lexicographic(net, [(0, 1)])
    assert abs(lex.eta(0, 1) - 2.0) < 1e-6
    assert [label for label, _ in lex.objective_log][0] == "eta[0:1]"
    again = esdi.RateSolution.from_json(lex.to_json())
    assert abs(again.eta(0, 1) - lex.eta(0, 1)) < 1e-12

    assert esdi.solve_mred_dc(net, [((0, 1), 6, 4)]) is not None
    assert esdi.solve_mred_dc(net, [((0, 1), 6, 4), ((0, 3), 6, 4)]) is None

    workload = [esdi.Commodity(0, (0, 1), 6, 1), esdi.Commodity(1, (0, 3), 6, 1)]
    out = esdi.simulate(net, workload, policy="ESDI-O", switching="balanced")
    times = [r["completion_time"] for r in out["records"]]
    assert times == [3, 6], times
    assert out["metrics"]["avg_completion_time"] == 4.5

    wax = esdi.Network.waxman(nodes=10, seed=4, cap_lo=1, cap_hi=3, sd_pairs=4)
    assert esdi.Network.from_json(wax.to_json()).links == wax.links
    jobs = esdi.generate_workload(wax, seed=2, mean_demand=20, min_demand=5, max_commodities=10, deadline_mu=0.6)
    assert len(jobs) == 10 and all(j.deadline is not None for j in jobs)
    runs = [esdi.simulate(wax, jobs, policy="ESDI-E", seed=5)["metrics"] for _ in range(2)]
    for m in runs:
        m.pop("wall_ms")
    assert runs[0] == runs[1]
    assert runs[0]["conservation_violations"] == 0

    try:
        esdi.simulate(net, workload, policy="QPASS")
    except RuntimeError as e:
        assert "not implemented" in str(e)
    else:
        raise AssertionError("reserved policy accepted")

    print(json.dumps(runs[0], indent=2))
    print("smoke test passed")


if __name__ == "__main__":
    main()
