# Tests for the ausculta package
