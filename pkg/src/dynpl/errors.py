class DataError(ValueError):
    """Input data violates a contract (bad table, empty cohort, hash mismatch...)."""
