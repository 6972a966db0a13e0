class ConfigurationError(ValueError):
    """Invalid or infeasible configuration, detected before or during setup."""
