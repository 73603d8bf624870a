"""Built-in CFA pattern files."""
