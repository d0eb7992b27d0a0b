// Exists only so the openblas-build [build-dependencies] entry in Cargo.toml
// takes effect (see the comment there). No build-time work is needed.
fn main() {}
