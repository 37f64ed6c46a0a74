"""Command-line surface: config schemas, file-level services and subcommand dispatch."""
