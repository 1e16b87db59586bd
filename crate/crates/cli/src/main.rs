fn main() {
    std::process::exit(stormcast::run(std::env::args_os()));
}
