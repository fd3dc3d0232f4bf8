# bbpeel test suite
