fn main() {
    println!("prestroid");
}
