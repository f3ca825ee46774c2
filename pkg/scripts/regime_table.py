"""Print the no-arbitrage regime report for a few standard diffusion families.

    python3 scripts/regime_table.py
"""
from artifact.classify import classify
from artifact.diffusions import PowerLawDiffusion

FAMILIES = [
    ("squared Bessel, delta 0.5", PowerLawDiffusion.squared_bessel(0.5), "repurchase"),
    ("squared Bessel, delta 1", PowerLawDiffusion.squared_bessel(1.0), "repurchase"),
    ("squared Bessel, delta 1.5", PowerLawDiffusion.squared_bessel(1.5), "repurchase"),
    ("Brownian motion", PowerLawDiffusion.brownian(), "repurchase"),
    ("GBM mu 0.06 sigma 0.2", PowerLawDiffusion.gbm(0.06, 0.2), "issuance"),
]


def main():
    for label, fam, mode in FAMILIES:
        print(f"== {label} ({mode})")
        print(classify(fam, mode).table())
        print()


if __name__ == "__main__":
    main()
