"""Dual quaternion blending: why it keeps joints from collapsing.

Two bones rotate by 0 and 90 degrees about z. Linear matrix blending of
the two transforms shrinks a point halfway between them; the dual
quaternion blend stays rigid and rotates it by exactly 45 degrees.
"""
import numpy as np

from rigfield.geomcore import (Quaternion, RigidTransform, dq_from_transform, dqb_blend, quat_from_axis_angle,
                               transform_from_dq)


def main():
    a = RigidTransform()
    b = RigidTransform(Quaternion.from_axis_angle([0, 0, 1], np.pi / 2), (0.0, 0.0, 0.0))
    x = np.array([1.0, 0.0, 0.0])

    lbs = 0.5 * (a.matrix() + b.matrix()) @ np.append(x, 1.0)
    print("linear blend     ", np.round(lbs[:3], 4), "length", round(float(np.linalg.norm(lbs[:3])), 4))

    q = dqb_blend([(0.5, dq_from_transform(a)), (0.5, dq_from_transform(b))])
    y = q.apply(x)
    print("dual quaternion  ", np.round(y, 4), "length", round(float(np.linalg.norm(y)), 4))
    print("angle (deg)      ", round(float(np.degrees(np.arctan2(y[1], y[0]))), 6))

    # q and -q are the same rotation; the blend aligns hemispheres first
    flipped = dq_from_transform(b)
    flipped = type(flipped).from_arrays(-flipped.real.array, -flipped.dual.array)
    q2 = dqb_blend([(0.5, dq_from_transform(a)), (0.5, flipped)])
    print("sign-flipped bone", np.round(q2.apply(x), 4))

    # a full rigid transform round trip
    t = RigidTransform(Quaternion.from_array(quat_from_axis_angle([1, 1, 0], 0.7)), (0.2, -0.1, 0.4))
    back = transform_from_dq(dq_from_transform(t))
    print("round trip error ", float(np.abs(back.matrix() - t.matrix()).max()))


if __name__ == "__main__":
    main()
