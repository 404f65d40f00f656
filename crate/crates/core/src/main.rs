fn main() {
    std::process::exit(multiview_gam::cli::run(std::env::args_os()));
}
