"""Smoke test for the sparsetomo extension module.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import math
import tempfile

import sparsetomo as st


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    pyr = st.Mixture.pyramid()
    assert pyr.k == 4
    assert close(sum(pyr.weights), 1.0, 1e-12)

    r = st.Rotation.haar(7)
    m = r.matrix()
    for i in range(3):
        for j in range(3):
            dot = sum(m[i][k] * m[j][k] for k in range(3))
            assert close(dot, 1.0 if i == j else 0.0, 1e-12)

    g = pyr.gram()
    pts = st.factor_gram(g)
    back = st.gram(pts)
    assert all(close(back[i][j], g[i][j], 1e-9) for i in range(4) for j in range(4))
    assert st.shape_distance(pyr, pyr.rotate(r)) < 1e-9

    views = [pyr.project(st.Rotation.haar(s)) for s in range(2000)]
    avg = st.average_gram(views)
    gap = math.sqrt(sum((avg[i][j] - g[i][j]) ** 2 for i in range(4) for j in range(4)))
    norm = math.sqrt(sum(x * x for row in g for x in row))
    assert gap < 0.1 * norm, gap

    image = st.render(pyr, st.Rotation.identity(), t=48, noise_sd=0.0, seed=1)
    est = st.deconvolve(image, sigma2=pyr.sigma ** 2)
    assert est["weights"] and est["weights"] == sorted(est["weights"], reverse=True)

    path = st.lasso_path([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], [1.0, 2.0, 3.0])
    assert path[0][0] == 0.0 and path[-1][0] > 0.0

    try:
        st.run("simulate", "no_such_key = 1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    with tempfile.TemporaryDirectory() as out:
        report = st.run("simulate", f"fixture = pyramid\nN = 3\nT = 32\nout_dir = {out}\n")
        assert report, report

    print("smoke test ok")


if __name__ == "__main__":
    main()
