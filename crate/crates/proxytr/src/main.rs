fn main() {
    // Placeholder until the CLI module lands.
    eprintln!("proxytr: not yet wired");
    std::process::exit(2);
}
