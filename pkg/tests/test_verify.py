import xml.etree.ElementTree as ET

import pytest

from npr import verify
from npr.verify import CHECKS, CheckResult, junit_xml, run_checks


@pytest.fixture(scope="module")
def results(nets):
    return run_checks(nets)


def test_every_check_passes(results):
    bad = ["%s.%s: %s" % (r.group, r.name, r.message) for r in results if not r.ok]
    assert not bad, "\n".join(bad)


def test_check_count_and_groups(results):
    assert len(results) >= 30
    groups = {r.group for r in results}
    assert groups >= {"geometry", "clouds", "stq", "nets", "splat", "volume", "fusion", "losses"}
    names = [(g, n) for g, n, _ in CHECKS]
    assert len(names) == len(set(names))


def test_only_filter(nets):
    res = run_checks(nets, only="splat")
    assert res and all(r.group == "splat" for r in res)
    res = run_checks(nets, only="two_gaussian_blend")
    assert [r.name for r in res] == ["two_gaussian_blend"]


def test_failing_check_is_reported_not_raised(nets, monkeypatch):
    def broken(ctx):
        raise RuntimeError("boom")
    monkeypatch.setattr(verify, "CHECKS", CHECKS + [("demo", "broken", broken)])
    res = run_checks(nets, only="demo")
    assert len(res) == 1 and not res[0].ok and "boom" in res[0].message


def test_junit_xml():
    xml = junit_xml([CheckResult("g", "a", True, 0.1), CheckResult("g", "b", False, 0.2, "bad\nmore")])
    root = ET.fromstring(xml)
    assert root.get("tests") == "2" and root.get("failures") == "1"
    fail = root.findall("testcase")[1].find("failure")
    assert fail.get("message") == "bad" and fail.text == "bad\nmore"
