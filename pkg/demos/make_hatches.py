"""Write a square hatch pattern that alternates between x and y each layer.

    python demos/make_hatches.py square_hatches.cli --layers 4
"""
import argparse

from growfem.laser_path import alternating_hatches, serialize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--thickness", type=float, default=0.06)
    ap.add_argument("--origin", type=float, nargs=2, default=(0.96, 0.96))
    ap.add_argument("--extent", type=float, default=1.92)
    ap.add_argument("--spacing", type=float, default=0.48)
    args = ap.parse_args()
    path = alternating_hatches(args.layers, args.thickness, args.origin, args.extent,
                               args.spacing)
    with open(args.out, "w") as fh:
        fh.write(serialize(path))
    print(f"{args.out}: {path.stats()}")


if __name__ == "__main__":
    main()
