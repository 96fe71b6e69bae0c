"""Regional economic indicators from bank-card transactions.

The package turns card-payment records into 35 region-level indicators,
normalizes them through best-fit normal/lognormal CDFs, compresses them with
PCA, and fits logit-link GLMs that predict official socioeconomic indices.
"""
__version__ = "0.1.0"

INDEX_NAMES = (
    "gdp",
    "housing_price",
    "unemployment_rate",
    "higher_education_pct",
    "crime_rate",
    "life_expectancy",
)
