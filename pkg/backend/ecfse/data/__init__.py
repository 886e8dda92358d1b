# Built-in MATPOWER-subset case files
