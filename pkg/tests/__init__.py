# Test package for the MH2F-Net deraining toolkit
