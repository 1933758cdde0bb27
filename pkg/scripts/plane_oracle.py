"""Dense quadrature of the expected single-bounce received amplitude for a flat plane.

Integrates, over the emission origin on each element face and the emission
angle, the next-event contribution summed over all receiving elements. The
result is frozen into ``tests/oracles.py``; rerun this script if the plane
scene used there changes.
"""

import math

import numpy as np

from usray.transducer import TransducerArray, rx_weight_from_angle

N_ELEMENTS, PITCH, DEPTH, ALPHA = 8, 0.3, 5.0, 0.5
Z_WATER, Z_TISSUE = 1.48, 1.63


def expected_amplitude(n_theta: int, n_x: int) -> float:
    arr = TransducerArray(N_ELEMENTS, PITCH)
    gx, gw = np.polynomial.legendre.leggauss(n_x)
    gt, tw = np.polynomial.legendre.leggauss(n_theta)
    th, tw = gt * math.pi / 2, tw * math.pi / 2
    total = 0.0
    for e0 in range(N_ELEMENTS):
        centre = (e0 - (N_ELEMENTS - 1) / 2) * PITCH
        x0, xw = centre + gx * PITCH / 2, gw * PITCH / 2
        X, T = np.meshgrid(x0, th, indexing="ij")
        weight = np.outer(xw, tw)
        s, c = np.sin(T), np.cos(T)
        hx = X + DEPTH * s / c
        acc = 0.0
        for e in range(N_ELEMENTS):
            xe = (e - (N_ELEMENTS - 1) / 2) * PITCH
            vx, vz = xe - hx, -DEPTH
            dist = np.hypot(vx, vz)
            wx, wz = vx / dist, vz / dist
            # half vector between the incoming and outgoing directions
            mx, mz = wx - s, wz - c
            mn = np.hypot(mx, mz)
            mx, mz = mx / mn, mz / mn
            cos_m = -mz  # plane normal faces the array
            tan2 = (1 - cos_m**2) / cos_m**2
            lobe = (1 + tan2 / ALPHA**2) ** -1.5 / (2 * ALPHA) / cos_m**2 * 0.5
            cos_i = -(s * mx + c * mz)
            eta = Z_WATER / Z_TISSUE
            cos_t = np.sqrt(1 - eta**2 * (1 - cos_i**2))
            amp = (Z_WATER * cos_i - Z_TISSUE * cos_t) / (Z_WATER * cos_i + Z_TISSUE * cos_t)
            cos_rx = DEPTH / dist
            taper = rx_weight_from_angle(np.arccos(cos_rx), arr.main_lobe, arr.cutoff)
            acc = acc + amp * np.abs(amp) * lobe * taper * cos_rx * PITCH / dist
        total += np.sum(weight * c * acc)
    return float(total)


if __name__ == "__main__":
    coarse = expected_amplitude(4000, 24)
    fine = expected_amplitude(8000, 48)
    print(f"coarse {coarse!r}\nfine   {fine!r}\nrel change {abs(fine - coarse) / abs(fine):.2e}")
