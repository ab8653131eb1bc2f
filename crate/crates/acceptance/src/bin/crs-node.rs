//! The `crs` command line, built inside this package so the acceptance
//! run can start a real service process.

fn main() {
    crs_serve::cli::main();
}
