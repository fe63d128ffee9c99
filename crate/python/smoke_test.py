"""Quick check of the phydiff_py extension.

Build and install first:  pip install ./crates/python --no-build-isolation
"""

import math
import os
import random
import tempfile

import phydiff_py as pd


def main():
    rng = random.Random(0)
    h = w = 16

    a = [rng.random() for _ in range(h * w)]
    assert pd.ssim(a, a, h, w) == 1.0
    b = [v + 0.1 for v in a]
    assert abs(pd.psnr(a, b, h, w) - 20.0) < 1e-9

    dims = [1, 2, h, w]
    vol = pd.Volume(dims, [rng.random() for _ in range(2 * h * w)])
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "x.dvol")
        pd.write_dvol(path, vol)
        back = pd.read_dvol(path)
        assert back.dims == dims
        assert max(abs(x - y) for x, y in zip(back.data, vol.data)) < 1e-6

        sched = pd.ScheduleMap([2, h, w], [1e-3] * (2 * h * w), steps=64, beta_end=0.2)
        t = 10
        x0 = [0.3] * (h * w)
        noise = [rng.gauss(0.0, 1.0) for _ in range(h * w)]
        xt = sched.forward_noise(x0, t, 0, noise)
        phi = sched.phi(t, 0)
        assert abs(xt[0] - (math.sqrt(phi) * 0.3 + math.sqrt(1 - phi) * noise[0])) < 1e-12

        cfg = pd.RunConfig()
        cfg.set("seed", "7")
        assert cfg.get("seed") == "7"
        try:
            cfg.set("no.such.key", "1")
        except pd.PhydiffError:
            pass
        else:
            raise AssertionError("unknown key accepted")

        out = os.path.join(tmp, "ph")
        code = pd.run_cli(["make-phantom", "--out", out, "--phantom.slices", "2",
                           "--phantom.height", "16", "--phantom.width", "16",
                           "--phantom.dirs_per_shell", "6", "--phantom.tracts", "1"])
        assert code == 0, code
        dwi = pd.read_dvol(os.path.join(out, "dwi.dvol"))
        assert dwi.dims[1:] == [2, 16, 16]
        assert pd.run_cli(["--bogus"]) == 2

    print("python smoke test passed")


if __name__ == "__main__":
    main()
