# On-disk storage clients
