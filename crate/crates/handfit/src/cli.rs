//! Command-line front end. Placeholder while the lower layers are built.

pub fn run() -> i32 {
    eprintln!("handfit: not wired up yet");
    2
}
