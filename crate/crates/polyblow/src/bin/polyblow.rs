fn main() {
    eprintln!("cli wiring pending");
    std::process::exit(2);
}
