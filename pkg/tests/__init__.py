# Tests package for Project Skyvault
