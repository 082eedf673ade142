"""Command-line surface: one Command subclass per subcommand."""
