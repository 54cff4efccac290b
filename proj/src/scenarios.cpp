namespace fmpc {}
