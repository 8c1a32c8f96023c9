"""Independent collocation solve of F(x) = -F(F(lam x))/lam on [0, 1].

F is expanded in Chebyshev polynomials of u = 2x^2 - 1, so evenness is built
in and the basis stays well conditioned.  Unknowns are the Chebyshev
coefficients; equations are F(0) = 1 plus the functional equation at
Chebyshev points of x in (0, 1].  This shares no code with the package.
"""
import mpmath
from mpmath import mpf


def clenshaw(a, u):
    b1 = b2 = mpf(0)
    for c in reversed(a[1:]):
        b1, b2 = 2 * u * b1 - b2 + c, b1
    return u * b1 - b2 + a[0]


def clenshaw_deriv(a, u):
    # d/du sum a_j T_j(u) = sum j a_j U_{j-1}(u)
    b1 = b2 = mpf(0)
    for j in range(len(a) - 1, 0, -1):
        b1, b2 = 2 * u * b1 - b2 + j * a[j], b1
    return b1


def F(a, x):
    return clenshaw(a, 2 * x * x - 1)


def equations(a, xs):
    lam = -F(a, 1)
    out = [F(a, 0) - 1]
    for x in xs:
        out.append(F(a, x) + F(a, F(a, lam * x)) / lam)
    return out


def solve(degree=60, prec=200, iters=30):
    with mpmath.workprec(prec):
        m = degree + 1
        xs = [mpmath.cos(mpmath.pi * (2 * i + 1) / (4 * degree)) for i in range(degree)]
        # initial guess 1 - 1.52763 x^2 + 0.10482 x^4 in Chebyshev form of u
        # x^2 = (u+1)/2, x^4 = (u^2 + 2u + 1)/4, u^2 = (T2 + 1)/2
        c1, c2 = mpf("-1.52763"), mpf("0.10482")
        a = [mpf(0)] * m
        a[0] = 1 + c1 / 2 + c2 * (mpf(1) / 8 + mpf(1) / 4)
        a[1] = c1 / 2 + c2 / 2
        a[2] = c2 / 8
        h = mpf(2) ** (-prec // 2)
        for _ in range(iters):
            r = equations(a, xs)
            if max(abs(v) for v in r) < mpf(2) ** (-prec + 20):
                break
            jac = mpmath.matrix(m, m)
            for j in range(m):
                b = list(a)
                b[j] += h
                rb = equations(b, xs)
                for i in range(m):
                    jac[i, j] = (rb[i] - r[i]) / h
            step = mpmath.lu_solve(jac, mpmath.matrix([-v for v in r]))
            a = [ai + step[i] for i, ai in enumerate(a)]
        lam = -F(a, 1)
        # c1 = dF/dt at t = x^2 = 0, u = 2t - 1
        c1 = 2 * clenshaw_deriv(a, mpf(-1))
        lo, hi = mpf(0), mpf(1)
        for _ in range(prec):
            mid = (lo + hi) / 2
            if F(a, mid) > 0:
                lo = mid
            else:
                hi = mid
        return {"lambda": lam, "c1": c1, "x0": (lo + hi) / 2,
                "defect": max(abs(v) for v in equations(a, xs))}


if __name__ == "__main__":
    import time
    t = time.time()
    res = solve()
    for k, v in res.items():
        print(k, mpmath.nstr(v, 40))
    print("seconds", time.time() - t)
