import json
from pathlib import Path

ACCEPTANCE = {}
RESULTS_DIR = Path(__file__).resolve().parent.parent / "results"


def record(n: int, ok: bool, detail: str, data=None):
    """Register one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[n] = (ok, detail, data)
    print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail, _ = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
    RESULTS_DIR.mkdir(exist_ok=True)
    doc = {str(n): {"pass": ok, "detail": d, "data": data} for n, (ok, d, data) in sorted(ACCEPTANCE.items())}
    (RESULTS_DIR / "acceptance.json").write_text(json.dumps(doc, indent=1, default=str))
