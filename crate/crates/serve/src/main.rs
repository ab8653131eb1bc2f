fn main() {
    crs_serve::cli::main();
}
