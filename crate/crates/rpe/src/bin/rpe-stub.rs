//! Stub executable installed at remote-program paths.

fn main() {
    std::process::exit(cleave_rpe::stub::stub_main());
}
