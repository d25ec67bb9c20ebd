"""Smoke test for the pyfogrep extension.

Builds the extension with cargo unless PYFOGREP_LIB points at an already
built shared library, then exercises the bindings.
"""

import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def locate_library():
    lib = os.environ.get("PYFOGREP_LIB")
    if lib:
        return pathlib.Path(lib)
    subprocess.run(
        ["cargo", "build", "--release", "-p", "fogrep-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    for name in ("libpyfogrep.so", "libpyfogrep.dylib", "pyfogrep.dll"):
        path = ROOT / "target" / "release" / name
        if path.exists():
            return path
    sys.exit("extension library not found under target/release")


def load():
    tmp = tempfile.mkdtemp()
    suffix = ".pyd" if sys.platform == "win32" else ".so"
    shutil.copy(locate_library(), os.path.join(tmp, "pyfogrep" + suffix))
    sys.path.insert(0, tmp)
    import pyfogrep

    return pyfogrep


def main():
    fr = load()

    a = fr.VersionVector({"A": 3})
    b = fr.VersionVector({"B": 1})
    assert a.compare(b) == "concurrent"
    merged = a.join(b)
    assert merged.to_dict() == {"A": 3, "B": 1}
    assert merged.compare(a) == "greater"
    assert fr.VersionVector({"A": 0}) == fr.VersionVector()
    assert str(b.advance("B")) == '{"B":2}'

    sim = fr.SimCluster(["A", "B"], rtt_ms=20, seed=3)
    sim.create_keygroup("items", ["A", "B"])
    writer = sim.client("A")
    try:
        writer.read("items", "k")
    except fr.FogrepError:
        pass
    writer.update("items", "k", b"hello")
    sim.run_until_quiescent()
    assert sim.local_values("B", "items", "k") == [b"hello"]
    assert sim.converged("items")

    report = fr.run_forum(clients=3, ops=10, library=True, seed=1)
    assert report["mrc_violation_rate"] == 0.0
    assert report["rywc_violation_rate"] == 0.0
    assert report["converged"]

    lines = fr.run_scenario(str(ROOT / "crates" / "core" / "scenarios" / "mobile_app.json"))
    assert lines and lines[-1].startswith("step")

    print("pyfogrep smoke test ok")


if __name__ == "__main__":
    main()
