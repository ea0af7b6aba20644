"""Pure helpers: closed-form bounds, clamps and CSV reporting."""
