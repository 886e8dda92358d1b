# ecfse settings and error types
