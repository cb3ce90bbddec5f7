fn main() {
    std::process::exit(drugsurv::run(std::env::args_os()));
}
