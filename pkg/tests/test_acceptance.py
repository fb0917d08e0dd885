"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import json

import pytest

from refinerec.bench import CRITERIA


@pytest.mark.parametrize("cid", sorted(CRITERIA), ids=lambda c: f"criterion_{c:02d}")
def test_acceptance_criterion(cid, acceptance_log):
    result = CRITERIA[cid]()
    line = result.line()
    print(line)
    acceptance_log.append(line)
    assert result.passed, json.dumps(result.detail, indent=2, default=float)

