"""Record a run to a trace, replay it, then show that a single edited value is caught."""
import json
import tempfile
from pathlib import Path

from anticipate.experiment import replay, run

out = Path(tempfile.mkdtemp())
report = run("occlusion_crossing", 3, True, out)
print(f"trace   {report.trace}")
print(f"digest  {report.digest}")
rep = replay(report.trace)
print(f"replay  ok={rep.ok}")

lines = Path(report.trace).read_text().splitlines()
rec = json.loads(lines[50])
rec["robot"][1] += 1e-4
lines[50] = json.dumps(rec, separators=(",", ":"))
Path(report.trace).write_text("\n".join(lines) + "\n")
rep = replay(report.trace)
print(f"edited  ok={rep.ok} first mismatching tick {rep.first_mismatch}")
