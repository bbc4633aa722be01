# SPDX-License-Identifier: Apache-2.0
"""Smoke test for the vmplsim_py extension module.

Build first:  maturin develop -m crates/python/Cargo.toml
Then run:     python python/smoke_test.py
"""

import json
import os
import sys

import vmplsim_py as vs

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..")


def scenario(name):
    return os.path.join(ROOT, "scenarios", name)


def main():
    s = vs.Scenario.load(scenario("getpid_sync.json"))
    r = s.run()
    assert r.outcome == "completed", r.error
    assert r.routes()[2] == 1000
    assert r.forward_switches == 2000
    report = json.loads(r.report_json())
    assert report["switches"]["forward"] == 2000

    a = vs.Scenario.load(scenario("getpid_async.json")).run()
    assert a.forward_switches == 0 and a.routes()[3] == 1000

    inline = vs.Scenario.from_json('{"threads": [{"program": [{"op": "syscall", "nr": "getpid"}]}]}')
    one = inline.run(seed=4)
    assert one.routes()[2] == 1 and one.forward_switches == 2
    assert one.log == inline.run(seed=4).log

    try:
        vs.Scenario.from_json('{"bogus": 1}')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    table = vs.Scenario.load(scenario("alloc_touch_free.json")).compare(["sync", "pool"])
    assert "pf_ratio_super 2.274" in table

    probe = vs.Scenario.load(scenario("xom.json")).probe_xom(0x400000, 0x402000, 1)
    rows = probe.splitlines()[2:]
    assert len(rows) == 2 and all(r.split()[4] == "allow" for r in rows)

    rmp = vs.Rmp(16)
    rmp.assign(3)
    rmp.set_permissions(0, 3, 1, "r-u-")
    assert rmp.check(3, 1, "read") and not rmp.check(3, 1, "write")
    assert not rmp.check(3, 2, "read")
    assert rmp.perms(3, 1) == "r-u-"

    pol = vs.Policy.parse("5 open trace\n10 open deny:EPERM")
    assert pol.evaluate("open") == ("deny", 1, 1)
    assert pol.evaluate(39)[0] == "allow"

    sup, user = vs.pf_ratios()
    assert abs(sup - 2.274) < 1e-3 and abs(user - 2.298) < 1e-3
    print("smoke ok:", vs.__version__)
    return 0


if __name__ == "__main__":
    sys.exit(main())
