"""State estimation for partially observable radial distribution grids."""
