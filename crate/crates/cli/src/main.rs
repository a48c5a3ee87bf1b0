fn main() {
    std::process::exit(srvae_cli::run(std::env::args()));
}
