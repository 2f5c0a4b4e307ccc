# Motor tensorial con diferenciación automática (CPU, numpy)
