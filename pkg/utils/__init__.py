# Shared utilities: errors, logging, configuration, run sessions and storage
