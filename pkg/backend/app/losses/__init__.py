"""DPO, balanced-weight and stop-gradient scaled preference losses."""
